//! Two-level tourism class hierarchy, catalog items and the binary content
//! matrices that connect the levels.
//!
//! High-level (HL) classes are the children of `ROOT`. Low-level (LL)
//! classes are the children of HL classes and are what items link to.
//! Deeper classes are folded onto their LL ancestors: an item that names a
//! deep class is linked to every LL class above it.
//!
//! The document format is line oriented:
//!
//! ```text
//! C<TAB>parent<TAB>child      class edge, parent `ROOT` marks an HL class
//! I<TAB>{json ItemRecord}     catalog item
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. A parent label is
//! read as an HL class when one exists with that name, so `C Sports Sports`
//! declares an LL class `Sports` under the HL class `Sports`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::context::GeoPoint;
use crate::{Error, ItemId, Result};

pub const ROOT: &str = "ROOT";

/// Default link threshold, shared with the binning module.
pub const DEFAULT_LINK_THRESHOLD: f64 = 0.55;

const FIXTURE: &str = include_str!("../data/ontology_fixture.tsv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: ItemId,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner_id: Option<String>,
}

impl ItemRecord {
    pub fn new(id: u32, name: impl Into<String>) -> Self {
        ItemRecord {
            id: ItemId(id),
            name: name.into(),
            description: String::new(),
            keywords: Vec::new(),
            categories: None,
            location: None,
            partner_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemLink {
    pub class: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyGraph {
    hl_classes: BTreeSet<String>,
    ll_classes: BTreeSet<String>,
    hl_ll_edges: BTreeSet<(String, String)>,
    /// Deep class -> LL ancestors it folds onto.
    aliases: BTreeMap<String, BTreeSet<String>>,
    items: Vec<ItemRecord>,
    /// Item id -> links, kept sorted by class label.
    item_links: BTreeMap<ItemId, Vec<ItemLink>>,
    link_threshold: f64,
}

impl Default for OntologyGraph {
    fn default() -> Self {
        OntologyGraph {
            hl_classes: BTreeSet::new(),
            ll_classes: BTreeSet::new(),
            hl_ll_edges: BTreeSet::new(),
            aliases: BTreeMap::new(),
            items: Vec::new(),
            item_links: BTreeMap::new(),
            link_threshold: DEFAULT_LINK_THRESHOLD,
        }
    }
}

/// Parses an ontology document.
pub fn load_ontology(document: &str) -> Result<OntologyGraph> {
    let mut edges: Vec<(usize, String, String)> = Vec::new();
    let mut item_lines: Vec<(usize, ItemRecord)> = Vec::new();

    for (idx, raw) in document.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (tag, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected a tab-separated record".into(),
        })?;
        match tag {
            "C" => {
                let (parent, child) = rest.split_once('\t').ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: "class edge needs parent and child".into(),
                })?;
                let (parent, child) = (parent.trim(), child.trim());
                if parent.is_empty() || child.is_empty() || child == ROOT {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "empty or reserved class label".into(),
                    });
                }
                edges.push((line_no, parent.to_string(), child.to_string()));
            }
            "I" => {
                let item: ItemRecord =
                    serde_json::from_str(rest).map_err(|e| Error::Parse {
                        line: line_no,
                        message: format!("invalid item json: {e}"),
                    })?;
                item_lines.push((line_no, item));
            }
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unknown record tag `{other}`"),
                })
            }
        }
    }

    let mut graph = OntologyGraph::default();
    graph.hl_classes = edges
        .iter()
        .filter(|(_, p, _)| p == ROOT)
        .map(|(_, _, c)| c.clone())
        .collect();

    for (_, parent, child) in &edges {
        if parent != ROOT && graph.hl_classes.contains(parent) {
            graph.ll_classes.insert(child.clone());
            graph.hl_ll_edges.insert((parent.clone(), child.clone()));
        }
    }

    // Every other edge hangs a deeper class under an LL class or another
    // deep class.
    let mut parents: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    for (line, parent, child) in &edges {
        first_seen.entry(child.as_str()).or_insert(*line);
        if parent == ROOT || graph.hl_classes.contains(parent) {
            continue;
        }
        first_seen.entry(parent.as_str()).or_insert(*line);
        parents.entry(child.as_str()).or_default().insert(parent.as_str());
    }
    let mut mentioned: BTreeSet<&str> = parents.keys().copied().collect();
    mentioned.extend(parents.values().flatten().copied());
    for label in mentioned {
        if graph.hl_classes.contains(label) || graph.ll_classes.contains(label) {
            continue;
        }
        let mut ancestors = BTreeSet::new();
        let mut visited = BTreeSet::new();
        collect_ll_ancestors(label, &parents, &graph.ll_classes, &mut visited, &mut ancestors);
        if ancestors.is_empty() {
            return Err(Error::OrphanClass(label.to_string()));
        }
        graph.aliases.insert(label.to_string(), ancestors);
    }

    for (line, item) in item_lines {
        graph.add_item(item).map_err(|e| match e {
            Error::Parse { .. } => e,
            other => Error::Parse {
                line,
                message: other.to_string(),
            },
        })?;
    }
    Ok(graph)
}

fn collect_ll_ancestors<'a>(
    label: &'a str,
    parents: &BTreeMap<&'a str, BTreeSet<&'a str>>,
    ll: &BTreeSet<String>,
    visited: &mut BTreeSet<&'a str>,
    out: &mut BTreeSet<String>,
) {
    if !visited.insert(label) {
        return;
    }
    if let Some(ps) = parents.get(label) {
        for &p in ps {
            if ll.contains(p) {
                out.insert(p.to_string());
            } else {
                collect_ll_ancestors(p, parents, ll, visited, out);
            }
        }
    }
}

impl OntologyGraph {
    /// The bundled tourism ontology with the 29-item catalog.
    pub fn fixture() -> OntologyGraph {
        load_ontology(FIXTURE).expect("bundled ontology fixture is valid")
    }

    pub fn fixture_document() -> &'static str {
        FIXTURE
    }

    pub fn hl_classes(&self) -> impl Iterator<Item = &str> {
        self.hl_classes.iter().map(String::as_str)
    }

    pub fn ll_classes(&self) -> impl Iterator<Item = &str> {
        self.ll_classes.iter().map(String::as_str)
    }

    pub fn hl_count(&self) -> usize {
        self.hl_classes.len()
    }

    pub fn ll_count(&self) -> usize {
        self.ll_classes.len()
    }

    pub fn hl_ll_edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.hl_ll_edges.iter().map(|(h, l)| (h.as_str(), l.as_str()))
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn item(&self, id: ItemId) -> Option<&ItemRecord> {
        self.items.iter().find(|it| it.id == id)
    }

    pub fn item_index(&self, id: ItemId) -> Option<usize> {
        self.items.iter().position(|it| it.id == id)
    }

    pub fn item_ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|it| it.id).collect()
    }

    pub fn is_hl(&self, label: &str) -> bool {
        self.hl_classes.contains(label)
    }

    pub fn is_ll(&self, label: &str) -> bool {
        self.ll_classes.contains(label)
    }

    pub fn link_threshold(&self) -> f64 {
        self.link_threshold
    }

    pub fn set_link_threshold(&mut self, threshold: f64) -> Result<()> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "link threshold {threshold} outside (0, 1]"
            )));
        }
        self.link_threshold = threshold;
        Ok(())
    }

    /// All links of an item, including those under the threshold.
    pub fn links(&self, item: ItemId) -> &[ItemLink] {
        self.item_links.get(&item).map(Vec::as_slice).unwrap_or(&[])
    }

    /// LL classes an item is linked to at or above the threshold.
    pub fn item_classes(&self, item: ItemId) -> Vec<&str> {
        self.links(item)
            .iter()
            .filter(|l| l.score >= self.link_threshold)
            .map(|l| l.class.as_str())
            .collect()
    }

    /// HL parents of an LL class.
    pub fn hl_parents(&self, ll: &str) -> Vec<&str> {
        self.hl_ll_edges
            .iter()
            .filter(|(_, l)| l == ll)
            .map(|(h, _)| h.as_str())
            .collect()
    }

    /// HL classes reachable from an item's effective links.
    pub fn item_hl_classes(&self, item: ItemId) -> BTreeSet<&str> {
        self.item_classes(item)
            .into_iter()
            .flat_map(|l| self.hl_parents(l))
            .collect()
    }

    /// Resolves a category label to the LL classes it stands for.
    pub fn resolve_category(&self, label: &str) -> Result<Vec<String>> {
        if self.ll_classes.contains(label) {
            return Ok(vec![label.to_string()]);
        }
        if let Some(ancestors) = self.aliases.get(label) {
            return Ok(ancestors.iter().cloned().collect());
        }
        Err(Error::UnknownClass(label.to_string()))
    }

    /// Appends an item. Items that carry `categories` are linked with score
    /// 1.0; others start unlinked.
    pub fn add_item(&mut self, item: ItemRecord) -> Result<()> {
        if item.name.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "item {} has an empty name",
                item.id
            )));
        }
        if self.item_index(item.id).is_some() {
            return Err(Error::Duplicate {
                what: "item",
                id: item.id.to_string(),
            });
        }
        let mut links = Vec::new();
        if let Some(categories) = &item.categories {
            for category in categories {
                for class in self.resolve_category(category)? {
                    links.push(ItemLink { class, score: 1.0 });
                }
            }
        }
        let id = item.id;
        self.items.push(item);
        if !links.is_empty() {
            self.set_links(id, links)?;
        }
        Ok(())
    }

    /// Replaces the links of an existing item.
    pub fn set_links(&mut self, item: ItemId, links: Vec<ItemLink>) -> Result<()> {
        if self.item_index(item).is_none() {
            return Err(Error::UnknownItem(item));
        }
        let mut merged: BTreeMap<String, f64> = BTreeMap::new();
        for link in links {
            if !self.ll_classes.contains(&link.class) {
                return Err(Error::UnknownClass(link.class));
            }
            if !(0.0..=1.0).contains(&link.score) {
                return Err(Error::InvalidArgument(format!(
                    "link score {} outside [0, 1]",
                    link.score
                )));
            }
            let slot = merged.entry(link.class).or_insert(link.score);
            *slot = slot.max(link.score);
        }
        self.item_links.insert(
            item,
            merged
                .into_iter()
                .map(|(class, score)| ItemLink { class, score })
                .collect(),
        );
        Ok(())
    }

    /// Content matrices in deterministic order: classes by label, items in
    /// insertion order.
    pub fn content_matrices(&self) -> ContentMatrices {
        let hl_labels: Vec<String> = self.hl_classes.iter().cloned().collect();
        let ll_labels: Vec<String> = self.ll_classes.iter().cloned().collect();
        let item_ids = self.item_ids();

        let mut hl_ll = BinaryMatrix::zeros(hl_labels.len(), ll_labels.len());
        for (i, h) in hl_labels.iter().enumerate() {
            for (j, l) in ll_labels.iter().enumerate() {
                if self.hl_ll_edges.contains(&(h.clone(), l.clone())) {
                    hl_ll.set(i, j);
                }
            }
        }
        let ll_index: HashMap<&str, usize> = ll_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let mut ll_item = BinaryMatrix::zeros(ll_labels.len(), item_ids.len());
        for (k, id) in item_ids.iter().enumerate() {
            for class in self.item_classes(*id) {
                ll_item.set(ll_index[class], k);
            }
        }
        ContentMatrices {
            hl_labels,
            ll_labels,
            item_ids,
            hl_ll,
            ll_item,
        }
    }
}

/// Dense 0/1 matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl BinaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BinaryMatrix {
            rows,
            cols,
            bits: vec![0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut m = BinaryMatrix::zeros(rows.len(), cols);
        for (r, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), cols, "ragged matrix");
            for (c, &b) in row.iter().enumerate() {
                if b != 0 {
                    m.set(r, c);
                }
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c] != 0
    }

    fn set(&mut self, r: usize, c: usize) {
        self.bits[r * self.cols + c] = 1;
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.bits.chunks(self.cols.max(1)).take(self.rows).map(<[u8]>::to_vec).collect()
    }

    /// `vᵀ · M`.
    pub fn left_multiply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &weight) in v.iter().enumerate() {
            if weight == 0.0 {
                continue;
            }
            for (c, slot) in out.iter_mut().enumerate() {
                if self.get(r, c) {
                    *slot += weight;
                }
            }
        }
        out
    }

    pub fn col_sums(&self) -> Vec<usize> {
        (0..self.cols)
            .map(|c| (0..self.rows).filter(|&r| self.get(r, c)).count())
            .collect()
    }

    pub fn col(&self, c: usize) -> Vec<usize> {
        (0..self.rows).filter(|&r| self.get(r, c)).collect()
    }

    pub fn row(&self, r: usize) -> Vec<usize> {
        (0..self.cols).filter(|&c| self.get(r, c)).collect()
    }
}

/// Binary content matrices linking HL → LL → items.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentMatrices {
    pub hl_labels: Vec<String>,
    pub ll_labels: Vec<String>,
    pub item_ids: Vec<ItemId>,
    /// |HL| × |LL|
    pub hl_ll: BinaryMatrix,
    /// |LL| × |items|
    pub ll_item: BinaryMatrix,
}

impl ContentMatrices {
    pub fn hl_index(&self, label: &str) -> Option<usize> {
        self.hl_labels.iter().position(|l| l == label)
    }

    pub fn ll_index(&self, label: &str) -> Option<usize> {
        self.ll_labels.iter().position(|l| l == label)
    }

    pub fn item_index(&self, item: ItemId) -> Option<usize> {
        self.item_ids.iter().position(|&i| i == item)
    }
}
