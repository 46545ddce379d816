//! Context pre-filtering: hard location cutoff, weather multipliers and
//! willingness to repeat an already consumed offer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ontology::OntologyGraph;
use crate::rec::by_score_then_id;
use crate::{Error, ItemId, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_RADIUS_KM: f64 = 50.0;
pub const DEFAULT_DECAY_KM: f64 = 25.0;
pub const DEFAULT_TAU_DAYS: f64 = 30.0;
const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<GeoPoint> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lat.is_finite() && (-90.0..=90.0).contains(&self.lat))
            || !(self.lon.is_finite() && (-180.0..=180.0).contains(&self.lon))
        {
            return Err(Error::InvalidArgument(format!(
                "invalid coordinates ({}, {})",
                self.lat, self.lon
            )));
        }
        Ok(())
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weather {
    Sunny,
    Cloudy,
    Rainy,
}

impl Weather {
    pub const ALL: [Weather; 3] = [Weather::Sunny, Weather::Cloudy, Weather::Rainy];

    pub fn as_str(self) -> &'static str {
        match self {
            Weather::Sunny => "sunny",
            Weather::Cloudy => "cloudy",
            Weather::Rainy => "rainy",
        }
    }
}

impl fmt::Display for Weather {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Weather {
    type Err = Error;

    fn from_str(s: &str) -> Result<Weather> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sunny" => Ok(Weather::Sunny),
            "cloudy" => Ok(Weather::Cloudy),
            "rainy" => Ok(Weather::Rainy),
            other => Err(Error::InvalidArgument(format!(
                "unknown weather `{other}` (expected sunny, cloudy or rainy)"
            ))),
        }
    }
}

/// Per-class weather factors and repetition time constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassContext {
    #[serde(default)]
    pub weather: BTreeMap<Weather, f64>,
    pub tau_days: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LocationMode {
    /// Drop items farther than the radius.
    Cutoff { radius_km: f64 },
    /// Keep everything, multiply by `exp(-d / scale_km)`.
    Decay { scale_km: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextParams {
    pub classes: BTreeMap<String, ClassContext>,
    /// Used for classes missing from `classes`.
    pub default_tau_days: f64,
    pub location: LocationMode,
}

/// Classes that get the outdoor weather row in the default table.
const OUTDOOR_CLASSES: &[&str] = &[
    "Adventure",
    "Beach",
    "Football",
    "Golf",
    "Motor Sports",
    "Nature",
    "Routes",
    "Sports",
    "Theme park",
    "ViewPoints",
    "Water Sports",
];

const CLASS_TAU_DAYS: &[(&str, f64)] = &[
    ("Gastro", 3.0),
    ("Nightlife", 7.0),
    ("Culture", 180.0),
    ("Museums", 180.0),
];

impl Default for ContextParams {
    fn default() -> Self {
        let outdoor: BTreeMap<Weather, f64> = [
            (Weather::Rainy, 0.2),
            (Weather::Cloudy, 0.7),
            (Weather::Sunny, 1.0),
        ]
        .into_iter()
        .collect();
        let mut classes = BTreeMap::new();
        for &class in OUTDOOR_CLASSES {
            classes.insert(
                class.to_string(),
                ClassContext {
                    weather: outdoor.clone(),
                    tau_days: DEFAULT_TAU_DAYS,
                },
            );
        }
        for &(class, tau) in CLASS_TAU_DAYS {
            classes
                .entry(class.to_string())
                .or_insert_with(|| ClassContext {
                    weather: BTreeMap::new(),
                    tau_days: tau,
                })
                .tau_days = tau;
        }
        ContextParams {
            classes,
            default_tau_days: DEFAULT_TAU_DAYS,
            location: LocationMode::Cutoff {
                radius_km: DEFAULT_RADIUS_KM,
            },
        }
    }
}

impl ContextParams {
    /// Parses a `class -> {weather: {condition: factor}, tau_days}` JSON
    /// object and overlays it on the defaults.
    pub fn from_json(text: &str) -> Result<ContextParams> {
        let overrides: BTreeMap<String, ClassContext> = serde_json::from_str(text)?;
        let mut params = ContextParams::default();
        params.classes.extend(overrides);
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        for (class, cc) in &self.classes {
            if !(cc.tau_days > 0.0 && cc.tau_days.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "class `{class}`: tau_days must be positive"
                )));
            }
            if let Some((w, f)) = cc.weather.iter().find(|(_, f)| !(0.0..=1.0).contains(*f)) {
                return Err(Error::InvalidArgument(format!(
                    "class `{class}`: weather factor {f} for {w} outside [0, 1]"
                )));
            }
        }
        match self.location {
            LocationMode::Cutoff { radius_km: r } | LocationMode::Decay { scale_km: r }
                if r > 0.0 => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "location radius/scale must be positive".into(),
                ))
            }
        }
        if self.default_tau_days <= 0.0 {
            return Err(Error::InvalidArgument("default_tau_days must be positive".into()));
        }
        Ok(())
    }

    pub fn tau_seconds(&self, class: &str) -> f64 {
        self.classes
            .get(class)
            .map_or(self.default_tau_days, |c| c.tau_days)
            * SECONDS_PER_DAY
    }
}

/// Request-time context. Timestamps are Unix seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextState {
    pub hotel: Option<GeoPoint>,
    pub weather: Option<Weather>,
    pub now: i64,
    /// (item, consumption time) pairs for the requesting user.
    pub history: Vec<(ItemId, i64)>,
}

impl ContextState {
    /// Context with nothing to filter on.
    pub fn neutral() -> Self {
        ContextState::default()
    }

    fn last_consumed(&self, item: ItemId) -> Option<i64> {
        self.history
            .iter()
            .filter(|(i, _)| *i == item)
            .map(|(_, t)| *t)
            .max()
    }
}

/// Items within `radius_km` of the hotel; items without a location pass.
pub fn location_filter(
    items: &[ItemId],
    graph: &OntologyGraph,
    hotel: GeoPoint,
    radius_km: f64,
) -> Result<Vec<ItemId>> {
    if radius_km.is_nan() || radius_km <= 0.0 {
        return Err(Error::InvalidArgument("radius must be positive".into()));
    }
    hotel.validate()?;
    let mut kept = Vec::with_capacity(items.len());
    for &id in items {
        let item = graph.item(id).ok_or(Error::UnknownItem(id))?;
        match item.location {
            None => kept.push(id),
            Some(loc) => {
                loc.validate()?;
                if haversine_km(hotel, loc) <= radius_km {
                    kept.push(id);
                }
            }
        }
    }
    Ok(kept)
}

/// Weather factor of a class; 1.0 when the class or condition is not listed.
pub fn weather_penalty(class: &str, condition: Weather, params: &ContextParams) -> f64 {
    params
        .classes
        .get(class)
        .and_then(|c| c.weather.get(&condition))
        .copied()
        .unwrap_or(1.0)
}

/// `1 - exp(-dt / tau)`; `None` (never consumed) gives 1.0.
pub fn repetition_willingness(class: &str, elapsed_seconds: Option<f64>, params: &ContextParams) -> f64 {
    match elapsed_seconds {
        None => 1.0,
        Some(dt) => 1.0 - (-dt.max(0.0) / params.tau_seconds(class)).exp(),
    }
}

/// Context multiplier per item. Items removed by the location cutoff are
/// absent from the map.
pub fn context_factors(
    items: &[ItemId],
    graph: &OntologyGraph,
    ctx: &ContextState,
    params: &ContextParams,
) -> Result<BTreeMap<ItemId, f64>> {
    let mut out = BTreeMap::new();
    for &id in items {
        let item = graph.item(id).ok_or(Error::UnknownItem(id))?;
        let mut factor = 1.0;
        if let (Some(hotel), Some(loc)) = (ctx.hotel, item.location) {
            hotel.validate()?;
            loc.validate()?;
            let d = haversine_km(hotel, loc);
            match params.location {
                LocationMode::Cutoff { radius_km } => {
                    if d > radius_km {
                        continue;
                    }
                }
                LocationMode::Decay { scale_km } => factor *= (-d / scale_km).exp(),
            }
        }
        let classes = graph.item_classes(id);
        if let Some(w) = ctx.weather {
            let best = classes
                .iter()
                .map(|c| weather_penalty(c, w, params))
                .fold(f64::NEG_INFINITY, f64::max);
            if best.is_finite() {
                factor *= best;
            }
        }
        if let Some(t) = ctx.last_consumed(id) {
            let dt = (ctx.now - t).max(0) as f64;
            let worst = if classes.is_empty() {
                repetition_willingness("", Some(dt), params)
            } else {
                classes
                    .iter()
                    .map(|c| repetition_willingness(c, Some(dt), params))
                    .fold(f64::INFINITY, f64::min)
            };
            factor *= worst;
        }
        out.insert(id, factor);
    }
    Ok(out)
}

/// Drops location-filtered items, multiplies the rest by their context
/// factor and re-sorts best-first (ties by item id).
pub fn apply_context(
    scored: &[(ItemId, f64)],
    graph: &OntologyGraph,
    ctx: &ContextState,
    params: &ContextParams,
) -> Result<Vec<(ItemId, f64)>> {
    if let Some((id, s)) = scored.iter().find(|(_, s)| !(*s >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "item {id} has negative or NaN score {s}"
        )));
    }
    let ids: Vec<ItemId> = scored.iter().map(|(i, _)| *i).collect();
    let factors = context_factors(&ids, graph, ctx, params)?;
    let mut out: Vec<(ItemId, f64)> = scored
        .iter()
        .filter_map(|(i, s)| factors.get(i).map(|f| (*i, s * f)))
        .collect();
    out.sort_by(by_score_then_id);
    Ok(out)
}
