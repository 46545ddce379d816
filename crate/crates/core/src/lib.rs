//! Phase-evolving, ontology-based, context-aware tourism recommender.
//!
//! The engine starts cold with an ontology of tourism classes and a
//! catalog of partner offers. Users pick high-level interests on their
//! first login and receive content-based recommendations. As ratings,
//! users and rating density accumulate, the engine activates:
//!
//! 1. content recommender over preference vectors ([`preferences`]),
//! 2. damped-mean popularity cascade in front of it ([`popularity`]),
//! 3. K-Prototypes clustering + kNN on demographics ([`demographic`]),
//! 4. a field-aware factorization machine ([`ffm`]).
//!
//! Context ([`context`]) pre-filters and penalizes candidates by
//! location, weather and willingness to repeat. [`engine`] ties the
//! pieces together behind an event-sourced state ([`eventlog`]).

pub mod binning;
pub mod context;
pub mod demographic;
pub mod engine;
mod error;
pub mod eventlog;
pub mod ffm;
pub mod metrics;
pub mod ontology;
pub mod phase;
pub mod popularity;
pub mod preferences;
pub mod rec;
pub mod simulation;
pub mod synthetic;

pub use error::{Error, Result};
pub use rec::{ItemId, RecList, Recommendation, RecommenderKind, UserId};
