//! Links unclassified items to low-level ontology classes by word-vector
//! similarity between the item text and each class label.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::ontology::{ItemLink, ItemRecord, OntologyGraph, DEFAULT_LINK_THRESHOLD};
use crate::{Error, Result};

const TOY_VECTORS: &str = include_str!("../data/toy_vectors.txt");
const STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Token → dense vector lookup plus a stopword list.
#[derive(Debug, Clone)]
pub struct VectorTable {
    dimension: usize,
    entries: HashMap<String, Vec<f64>>,
    stopwords: HashSet<String>,
}

impl VectorTable {
    /// Parses the word2vec text format: `<count> <dimension>` header, then
    /// `token v1 … vd` per line.
    pub fn parse(text: &str) -> Result<VectorTable> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let mut parts = header.split_whitespace();
        let parse_usize = |s: Option<&str>| s.and_then(|s| s.parse::<usize>().ok());
        let (count, dimension) = match (parse_usize(parts.next()), parse_usize(parts.next())) {
            (Some(c), Some(d)) if d >= 1 => (c, d),
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "header must be `<count> <dimension>` with dimension >= 1".into(),
                })
            }
        };
        let mut entries = HashMap::with_capacity(count);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().unwrap_or_default().to_lowercase();
            let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
            let values = values.map_err(|e| Error::Parse {
                line: idx + 1,
                message: format!("bad vector component: {e}"),
            })?;
            if values.len() != dimension {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected {dimension} components, found {}", values.len()),
                });
            }
            entries.insert(token, values);
        }
        if entries.len() != count {
            return Err(Error::Parse {
                line: 1,
                message: format!("header announces {count} vectors, found {}", entries.len()),
            });
        }
        Ok(VectorTable {
            dimension,
            entries,
            stopwords: HashSet::new(),
        })
    }

    /// Stopword file: one token per line.
    pub fn with_stopwords(mut self, text: &str) -> Self {
        self.stopwords = text
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        self
    }

    /// Small bundled table (dimension 16) that covers the catalog fixture.
    pub fn bundled() -> VectorTable {
        VectorTable::parse(TOY_VECTORS)
            .expect("bundled vector table is valid")
            .with_stopwords(STOPWORDS)
    }

    pub fn from_entries(
        dimension: usize,
        entries: impl IntoIterator<Item = (String, Vec<f64>)>,
        stopwords: impl IntoIterator<Item = String>,
    ) -> Result<VectorTable> {
        if dimension == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        let mut map = HashMap::new();
        for (token, v) in entries {
            if v.len() != dimension {
                return Err(Error::DimensionMismatch {
                    what: "word vector",
                    expected: dimension,
                    got: v.len(),
                });
            }
            map.insert(token.to_lowercase(), v);
        }
        Ok(VectorTable {
            dimension,
            entries: map,
            stopwords: stopwords.into_iter().map(|s| s.to_lowercase()).collect(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(token).map(Vec::as_slice)
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    /// Multiplies every vector by `factor`.
    pub fn scaled(&self, factor: f64) -> VectorTable {
        let mut out = self.clone();
        for v in out.entries.values_mut() {
            v.iter_mut().for_each(|x| *x *= factor);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub threshold: f64,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig {
            threshold: DEFAULT_LINK_THRESHOLD,
        }
    }
}

impl BinningConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "binning threshold {threshold} outside (0, 1]"
            )));
        }
        Ok(BinningConfig { threshold })
    }
}

/// Lowercase alphanumeric tokens with stopwords removed, in text order.
pub fn tokenize_normalize(text: &str, table: &VectorTable) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !table.is_stopword(t))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    /// None of the tokens were in the table.
    pub out_of_vocabulary: bool,
}

/// Mean of the in-vocabulary token vectors.
pub fn embed(tokens: &[String], table: &VectorTable) -> Embedding {
    let mut sum = vec![0.0; table.dimension()];
    let mut found = 0usize;
    for token in tokens {
        if let Some(v) = table.get(token) {
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            found += 1;
        }
    }
    if found > 0 {
        sum.iter_mut().for_each(|s| *s /= found as f64);
    }
    Embedding {
        vector: sum,
        out_of_vocabulary: found == 0,
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningOutcome {
    /// Links at or above the threshold, sorted by class label.
    pub links: Vec<ItemLink>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Description and keyword tokens, deduplicated, first occurrence kept.
pub fn item_tokens(item: &ItemRecord, table: &VectorTable) -> Vec<String> {
    let mut seen = HashSet::new();
    let keyword_text = item.keywords.join(" ");
    tokenize_normalize(&item.description, table)
        .into_iter()
        .chain(tokenize_normalize(&keyword_text, table))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

pub fn bin_item(
    item: &ItemRecord,
    graph: &OntologyGraph,
    table: &VectorTable,
    cfg: &BinningConfig,
) -> Result<BinningOutcome> {
    if item.description.trim().is_empty() && item.keywords.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "item {} has neither description nor keywords",
            item.id
        )));
    }
    if graph.ll_count() == 0 {
        return Err(Error::InvalidArgument(
            "ontology has no low-level classes".into(),
        ));
    }
    let item_vec = embed(&item_tokens(item, table), table);
    if item_vec.out_of_vocabulary {
        return Ok(BinningOutcome {
            links: Vec::new(),
            diagnostic: Some(format!(
                "item {} has no in-vocabulary tokens; left unlinked",
                item.id
            )),
        });
    }
    let links = graph
        .ll_classes()
        .filter_map(|class| {
            let class_vec = embed(&tokenize_normalize(class, table), table);
            let score = cosine(&item_vec.vector, &class_vec.vector);
            (score >= cfg.threshold).then(|| ItemLink {
                class: class.to_string(),
                // float noise can push an identical pair a hair above 1
                score: score.min(1.0),
            })
        })
        .collect();
    Ok(BinningOutcome {
        links,
        diagnostic: None,
    })
}
