//! Constraint-fused navigable graph index.
//!
//! Every node carries an embedding, one sortable numeric attribute and a
//! label bitmap; every adjacency entry carries a copy of the neighbor's
//! attribute and labels so traversal can test constraints without touching
//! the neighbor's payload. The topology is a multi-layer navigable
//! small-world graph built by incremental insertion; neighbor lists are
//! chosen by dominance pruning, which never drops the only edge bridging a
//! distinct attribute range or label region.

mod partition;
mod serial;

pub use partition::{PartitionKey, PartitionedIndex};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{fnv1a64, splitmix64, unit_from_hash};

/// Attribute-window quantile used by dominance pruning: two nodes cover
/// the same attribute region when they lie within this fraction of the
/// partition's attribute span.
const DOMINANCE_ATTR_QUANTILE: f64 = 0.25;
/// Compaction triggers when tombstones exceed this fraction of nodes.
const TOMBSTONE_COMPACT_FRACTION: f64 = 0.20;
const MAX_LEVEL: usize = 24;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("node `{0}` already present")]
    DuplicateId(String),
    #[error("unknown node `{0}`")]
    UnknownId(String),
    #[error("embedding dimension {actual} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero embedding cannot be normalized")]
    ZeroVector,
    #[error("build requires an empty index")]
    NotEmpty,
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("corrupt index stream: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn distance(&self, a: &[f32], b: &[f32]) -> f32 {
        match self {
            Metric::Cosine => {
                let mut dot = 0.0f32;
                for i in 0..a.len() {
                    dot += a[i] * b[i];
                }
                1.0 - dot
            }
            Metric::Euclidean => {
                let mut acc = 0.0f32;
                for i in 0..a.len() {
                    let d = a[i] - b[i];
                    acc += d * d;
                }
                acc.sqrt()
            }
        }
    }

    /// Maps a distance to a similarity in [0, 1].
    pub fn similarity(&self, distance: f32) -> f64 {
        match self {
            Metric::Cosine => (1.0 - distance as f64 / 2.0).clamp(0.0, 1.0),
            Metric::Euclidean => 1.0 / (1.0 + distance as f64),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexParams {
    pub metric: Metric,
    /// Maximum degree per node (M).
    pub max_degree: usize,
    pub ef_construction: usize,
    /// Geometric level-assignment parameter in (0, 1).
    pub layer_decay: f64,
    pub partition: PartitionKey,
    pub seed: u64,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams {
            metric: Metric::Cosine,
            max_degree: 16,
            ef_construction: 128,
            layer_decay: 1.0 / std::f64::consts::E,
            partition: PartitionKey::default(),
            seed: 42,
        }
    }
}

impl IndexParams {
    fn validate(&self) -> Result<(), IndexError> {
        if self.max_degree == 0 {
            return Err(IndexError::BadParams("max_degree must be positive".into()));
        }
        if self.ef_construction < self.max_degree {
            return Err(IndexError::BadParams(
                "ef_construction must be >= max_degree".into(),
            ));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay < 1.0) {
            return Err(IndexError::BadParams(
                "layer_decay must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Node payload handed to [`FusionIndex::insert`]. Labels are external
/// names; the index interns them into its label dictionary.
#[derive(Clone, Debug)]
pub struct IndexNode {
    pub id: String,
    pub embedding: Vec<f32>,
    pub attr: f64,
    pub labels: Vec<String>,
}

impl IndexNode {
    pub fn new(id: impl Into<String>, embedding: Vec<f32>, attr: f64) -> Self {
        IndexNode {
            id: id.into(),
            embedding,
            attr,
            labels: Vec::new(),
        }
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Self {
        self.labels = labels;
        self
    }
}

/// Compact label set over the index's label dictionary.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LabelBits {
    words: Vec<u64>,
}

// Trailing zero words are insignificant: bitmaps grow lazily in memory but
// are padded to a fixed width on disk.
impl PartialEq for LabelBits {
    fn eq(&self, other: &Self) -> bool {
        let n = self.words.len().max(other.words.len());
        (0..n).all(|i| {
            self.words.get(i).copied().unwrap_or(0) == other.words.get(i).copied().unwrap_or(0)
        })
    }
}

impl Eq for LabelBits {}

impl LabelBits {
    pub fn set(&mut self, bit: u32) {
        let word = (bit / 64) as usize;
        if word >= self.words.len() {
            self.words.resize(word + 1, 0);
        }
        self.words[word] |= 1u64 << (bit % 64);
    }

    pub fn get(&self, bit: u32) -> bool {
        let word = (bit / 64) as usize;
        self.words.get(word).is_some_and(|w| w & (1u64 << (bit % 64)) != 0)
    }

    pub fn intersects(&self, other: &LabelBits) -> bool {
        self.words
            .iter()
            .zip(other.words.iter())
            .any(|(a, b)| a & b != 0)
    }

    pub fn intersection_count(&self, other: &LabelBits) -> u32 {
        self.words
            .iter()
            .zip(other.words.iter())
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

    pub fn contains_all(&self, other: &LabelBits) -> bool {
        for (i, w) in other.words.iter().enumerate() {
            let own = self.words.get(i).copied().unwrap_or(0);
            if own & w != *w {
                return false;
            }
        }
        true
    }

    pub fn count(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|w| *w == 0)
    }

    pub(crate) fn words(&self) -> &[u64] {
        &self.words
    }

    pub(crate) fn from_words(words: Vec<u64>) -> Self {
        LabelBits { words }
    }
}

/// Dictionary of label names; bitmap bit positions are assignment order.
#[derive(Clone, Debug, Default)]
pub struct LabelDict {
    names: Vec<String>,
    by_name: HashMap<String, u32>,
}

impl LabelDict {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&bit) = self.by_name.get(name) {
            return bit;
        }
        let bit = self.names.len() as u32;
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), bit);
        bit
    }

    pub fn lookup(&self, name: &str) -> Option<u32> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, bit: u32) -> Option<&str> {
        self.names.get(bit as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn bits_for(&mut self, labels: &[String]) -> LabelBits {
        let mut bits = LabelBits::default();
        for l in labels {
            let bit = self.intern(l);
            bits.set(bit);
        }
        bits
    }

    /// Resolves label names without interning; unknown names are skipped
    /// (they can never match any node).
    pub fn resolve(&self, labels: &[String]) -> LabelBits {
        let mut bits = LabelBits::default();
        for l in labels {
            if let Some(bit) = self.lookup(l) {
                bits.set(bit);
            }
        }
        bits
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One adjacency entry: the neighbor plus copies of its attribute and
/// labels (refreshed on neighbor mutation) and the cached distance.
#[derive(Clone, Debug)]
pub struct AdjacencyEntry {
    pub neighbor: u32,
    pub attr: f64,
    pub labels: LabelBits,
    pub distance: f32,
}

#[derive(Clone, Debug)]
pub(crate) struct NodeData {
    pub id: String,
    pub embedding: Vec<f32>,
    pub attr: f64,
    pub labels: LabelBits,
    pub level: u8,
    pub dead: bool,
    /// Adjacency per layer, entries sorted by neighbor slot.
    pub layers: Vec<Vec<AdjacencyEntry>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuildReport {
    pub nodes: usize,
    pub edges: usize,
    pub level_histogram: Vec<usize>,
}

/// The fusion graph index for one (tenant, time-bucket) partition.
#[derive(Debug)]
pub struct FusionIndex {
    pub(crate) params: IndexParams,
    pub(crate) dim: Option<usize>,
    pub(crate) nodes: Vec<NodeData>,
    pub(crate) by_id: HashMap<String, u32>,
    pub(crate) entry: Option<u32>,
    pub(crate) max_level: usize,
    pub(crate) dict: LabelDict,
    live: usize,
    /// Slots sorted by (attr, id); dead slots are filtered on read.
    attr_dir: Vec<u32>,
    /// Lazily recomputed (min, max) attribute span over live nodes.
    span_cache: std::sync::RwLock<Option<(f64, f64)>>,
}

impl Clone for FusionIndex {
    fn clone(&self) -> Self {
        FusionIndex {
            params: self.params.clone(),
            dim: self.dim,
            nodes: self.nodes.clone(),
            by_id: self.by_id.clone(),
            entry: self.entry,
            max_level: self.max_level,
            dict: self.dict.clone(),
            live: self.live,
            attr_dir: self.attr_dir.clone(),
            span_cache: std::sync::RwLock::new(*self.span_cache.read().unwrap()),
        }
    }
}

impl FusionIndex {
    pub fn new(params: IndexParams) -> Result<Self, IndexError> {
        params.validate()?;
        Ok(FusionIndex {
            params,
            dim: None,
            nodes: Vec::new(),
            by_id: HashMap::new(),
            entry: None,
            max_level: 0,
            dict: LabelDict::default(),
            live: 0,
            attr_dir: Vec::new(),
            span_cache: std::sync::RwLock::new(None),
        })
    }

    pub fn params(&self) -> &IndexParams {
        &self.params
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn dict(&self) -> &LabelDict {
        &self.dict
    }

    pub fn contains(&self, id: &str) -> bool {
        self.live_slot(id).is_some()
    }

    pub fn entry_id(&self) -> Option<&str> {
        self.entry.map(|slot| self.nodes[slot as usize].id.as_str())
    }

    fn live_slot(&self, id: &str) -> Option<u32> {
        let slot = *self.by_id.get(id)?;
        if self.nodes[slot as usize].dead {
            None
        } else {
            Some(slot)
        }
    }

    /// Level assignment is a pure function of (seed, node id), so rebuilds
    /// and re-insertions reproduce the same level for the same id.
    fn level_for(&self, id: &str) -> usize {
        let h = splitmix64(fnv1a64(id.as_bytes()) ^ self.params.seed);
        let u = unit_from_hash(h);
        let level = (u.ln() / self.params.layer_decay.ln()).floor() as i64;
        level.clamp(0, MAX_LEVEL as i64) as usize
    }

    fn distance(&self, a: &[f32], b: &[f32]) -> f32 {
        self.params.metric.distance(a, b)
    }

    pub(crate) fn dist_to(&self, query: &[f32], slot: u32) -> f32 {
        self.distance(query, &self.nodes[slot as usize].embedding)
    }

    /// Attribute span (min, max) over live nodes.
    pub(crate) fn attr_span(&self) -> Option<(f64, f64)> {
        if let Some(span) = *self.span_cache.read().unwrap() {
            return Some(span);
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for n in &self.nodes {
            if !n.dead {
                min = min.min(n.attr);
                max = max.max(n.attr);
                any = true;
            }
        }
        if any {
            *self.span_cache.write().unwrap() = Some((min, max));
            Some((min, max))
        } else {
            None
        }
    }

    fn invalidate_span(&mut self) {
        *self.span_cache.write().unwrap() = None;
    }

    pub fn insert(&mut self, node: IndexNode) -> Result<(), IndexError> {
        if self.live_slot(&node.id).is_some() {
            return Err(IndexError::DuplicateId(node.id));
        }
        let mut embedding = node.embedding;
        match self.dim {
            Some(d) if d != embedding.len() => {
                return Err(IndexError::DimensionMismatch {
                    expected: d,
                    actual: embedding.len(),
                })
            }
            None => self.dim = Some(embedding.len()),
            _ => {}
        }
        if self.params.metric == Metric::Cosine {
            let norm: f32 = embedding.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm == 0.0 {
                return Err(IndexError::ZeroVector);
            }
            if (norm - 1.0).abs() > 1e-6 {
                for x in &mut embedding {
                    *x /= norm;
                }
            }
        }
        let labels = self.dict.bits_for(&node.labels);
        let level = self.level_for(&node.id);
        let slot = self.nodes.len() as u32;
        self.nodes.push(NodeData {
            id: node.id.clone(),
            embedding,
            attr: node.attr,
            labels,
            level: level as u8,
            dead: false,
            layers: vec![Vec::new(); level + 1],
        });
        self.by_id.insert(node.id, slot);
        self.live += 1;
        self.attr_dir_insert(slot);
        self.invalidate_span();

        let Some(entry) = self.entry else {
            self.entry = Some(slot);
            self.max_level = level;
            return Ok(());
        };

        let query = self.nodes[slot as usize].embedding.clone();
        let mut ep = entry;
        if self.max_level > level {
            for layer in ((level + 1)..=self.max_level).rev() {
                ep = self.greedy_closest(&query, ep, layer);
            }
        }
        let mut entries = vec![(self.dist_to(&query, ep), ep)];
        for layer in (0..=level.min(self.max_level)).rev() {
            let candidates =
                self.search_layer(&query, &entries, self.params.ef_construction, layer, None);
            let live: Vec<(f32, u32)> = candidates
                .iter()
                .copied()
                .filter(|&(_, s)| s != slot && !self.nodes[s as usize].dead)
                .collect();
            let selected = self.select_neighbors(slot, &live, self.params.max_degree);
            for (d, other) in selected {
                self.link(slot, other, layer, d);
            }
            entries = candidates;
        }
        if level > self.max_level {
            self.entry = Some(slot);
            self.max_level = level;
        }
        Ok(())
    }

    /// Dominance pruning: a candidate is dropped when an already-selected
    /// neighbor is closer to it than the new node is, covers the same
    /// attribute window, and shares a label. Candidates must be sorted by
    /// ascending distance.
    fn select_neighbors(
        &self,
        anchor: u32,
        candidates: &[(f32, u32)],
        max_degree: usize,
    ) -> Vec<(f32, u32)> {
        let span_width = self
            .attr_span()
            .map(|(lo, hi)| (hi - lo) * DOMINANCE_ATTR_QUANTILE)
            .unwrap_or(0.0);
        let mut selected: Vec<(f32, u32)> = Vec::new();
        for &(d_anchor, cand) in candidates {
            if selected.len() >= max_degree {
                break;
            }
            let c = &self.nodes[cand as usize];
            let dominated = selected.iter().any(|&(_, s)| {
                let sn = &self.nodes[s as usize];
                let d_sc = self.distance(&sn.embedding, &c.embedding);
                d_sc < d_anchor
                    && (sn.attr - c.attr).abs() <= span_width
                    && sn.labels.intersects(&c.labels)
            });
            if !dominated {
                selected.push((d_anchor, cand));
            }
            let _ = anchor;
        }
        selected
    }

    /// Connects `a -> b` and `b -> a` at `layer`, re-pruning `b`'s list if
    /// it overflows. Dead entries in `b`'s list are dropped on this touch.
    fn link(&mut self, a: u32, b: u32, layer: usize, distance: f32) {
        self.push_entry(a, b, layer, distance);
        self.push_entry(b, a, layer, distance);
        let blist = &self.nodes[b as usize].layers[layer];
        if blist.len() > self.params.max_degree || blist.iter().any(|e| self.nodes[e.neighbor as usize].dead) {
            let mut cands: Vec<(f32, u32)> = blist
                .iter()
                .filter(|e| !self.nodes[e.neighbor as usize].dead)
                .map(|e| (e.distance, e.neighbor))
                .collect();
            cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let keep = self.select_neighbors(b, &cands, self.params.max_degree);
            let mut entries: Vec<AdjacencyEntry> = keep
                .into_iter()
                .map(|(d, s)| self.make_entry(s, d))
                .collect();
            entries.sort_by_key(|e| e.neighbor);
            self.nodes[b as usize].layers[layer] = entries;
        }
    }

    fn make_entry(&self, slot: u32, distance: f32) -> AdjacencyEntry {
        let n = &self.nodes[slot as usize];
        AdjacencyEntry {
            neighbor: slot,
            attr: n.attr,
            labels: n.labels.clone(),
            distance,
        }
    }

    fn push_entry(&mut self, from: u32, to: u32, layer: usize, distance: f32) {
        let entry = self.make_entry(to, distance);
        let list = &mut self.nodes[from as usize].layers[layer];
        match list.binary_search_by_key(&to, |e| e.neighbor) {
            Ok(_) => {}
            Err(pos) => list.insert(pos, entry),
        }
    }

    /// Greedy single-path descent used on layers above the target level.
    fn greedy_closest(&self, query: &[f32], start: u32, layer: usize) -> u32 {
        let mut current = start;
        let mut best = self.dist_to(query, current);
        loop {
            let mut improved = false;
            let node = &self.nodes[current as usize];
            if layer < node.layers.len() {
                for e in &node.layers[layer] {
                    let d = self.dist_to(query, e.neighbor);
                    if d < best || (d == best && e.neighbor < current) {
                        best = d;
                        current = e.neighbor;
                        improved = true;
                    }
                }
            }
            if !improved {
                return current;
            }
        }
    }

    /// Beam search over one layer. Returns up to `ef` candidates sorted by
    /// (distance, slot). Dead nodes participate as routing glue; callers
    /// filter them from results. When `visited` is given, every distance
    /// evaluation on a new node increments it.
    pub(crate) fn search_layer(
        &self,
        query: &[f32],
        entries: &[(f32, u32)],
        ef: usize,
        layer: usize,
        mut visited_counter: Option<&mut usize>,
    ) -> Vec<(f32, u32)> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;

        #[derive(PartialEq)]
        struct Item(f32, u32);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Item {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                self.0
                    .total_cmp(&other.0)
                    .then_with(|| self.1.cmp(&other.1))
            }
        }

        let mut seen = vec![false; self.nodes.len()];
        let mut frontier: BinaryHeap<Reverse<Item>> = BinaryHeap::new();
        let mut best: BinaryHeap<Item> = BinaryHeap::new();
        for &(d, s) in entries {
            if !seen[s as usize] {
                seen[s as usize] = true;
                if let Some(c) = visited_counter.as_deref_mut() {
                    *c += 1;
                }
                frontier.push(Reverse(Item(d, s)));
                best.push(Item(d, s));
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        while let Some(Reverse(Item(d, slot))) = frontier.pop() {
            if best.len() >= ef {
                if let Some(worst) = best.peek() {
                    if d > worst.0 {
                        break;
                    }
                }
            }
            let node = &self.nodes[slot as usize];
            if layer >= node.layers.len() {
                continue;
            }
            for e in &node.layers[layer] {
                let idx = e.neighbor as usize;
                if seen[idx] {
                    continue;
                }
                seen[idx] = true;
                if let Some(c) = visited_counter.as_deref_mut() {
                    *c += 1;
                }
                let dn = self.dist_to(query, e.neighbor);
                let admit = best.len() < ef || best.peek().is_some_and(|w| dn < w.0);
                if admit {
                    frontier.push(Reverse(Item(dn, e.neighbor)));
                    best.push(Item(dn, e.neighbor));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<(f32, u32)> = best.into_iter().map(|Item(d, s)| (d, s)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    /// Plain (unconstrained) nearest-neighbor search. Returns up to `k`
    /// live node ids with distances, plus the visited-node count.
    pub fn knn(&self, query: &[f32], k: usize, ef: usize) -> Result<(Vec<(String, f32)>, usize), IndexError> {
        let Some(dim) = self.dim else {
            return Ok((Vec::new(), 0));
        };
        if query.len() != dim {
            return Err(IndexError::DimensionMismatch {
                expected: dim,
                actual: query.len(),
            });
        }
        let Some(entry) = self.entry else {
            return Ok((Vec::new(), 0));
        };
        let mut visited = 0usize;
        let mut ep = entry;
        visited += 1;
        for layer in (1..=self.max_level).rev() {
            ep = self.greedy_closest_counting(query, ep, layer, &mut visited);
        }
        let entries = vec![(self.dist_to(query, ep), ep)];
        let ef = ef.max(k);
        let found = self.search_layer(query, &entries, ef, 0, Some(&mut visited));
        let mut out: Vec<(String, f32)> = found
            .into_iter()
            .filter(|&(_, s)| !self.nodes[s as usize].dead)
            .map(|(d, s)| (self.nodes[s as usize].id.clone(), d))
            .collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        out.truncate(k);
        Ok((out, visited))
    }

    pub(crate) fn greedy_closest_counting(
        &self,
        query: &[f32],
        start: u32,
        layer: usize,
        visited: &mut usize,
    ) -> u32 {
        let mut current = start;
        let mut best = self.dist_to(query, current);
        loop {
            let mut improved = false;
            let node = &self.nodes[current as usize];
            if layer < node.layers.len() {
                for e in &node.layers[layer] {
                    *visited += 1;
                    let d = self.dist_to(query, e.neighbor);
                    if d < best || (d == best && e.neighbor < current) {
                        best = d;
                        current = e.neighbor;
                        improved = true;
                    }
                }
            }
            if !improved {
                return current;
            }
        }
    }

    /// Tombstones a node. Adjacency entries pointing at it are repaired
    /// lazily on the next touch of each referencing list; a compaction pass
    /// rebuilds the graph when tombstones exceed 20% of nodes.
    pub fn remove(&mut self, id: &str) -> Result<(), IndexError> {
        let slot = self
            .live_slot(id)
            .ok_or_else(|| IndexError::UnknownId(id.to_string()))?;
        self.nodes[slot as usize].dead = true;
        self.live -= 1;
        self.invalidate_span();
        if self.entry == Some(slot) {
            self.entry = self.elect_entry();
            self.max_level = self
                .entry
                .map(|e| self.nodes[e as usize].level as usize)
                .unwrap_or(0);
        }
        let dead = self.nodes.len() - self.live;
        if self.live > 0 && dead as f64 / self.nodes.len() as f64 > TOMBSTONE_COMPACT_FRACTION {
            self.compact();
        }
        Ok(())
    }

    /// Highest-level live node, ties broken by smallest id.
    fn elect_entry(&self) -> Option<u32> {
        let mut best: Option<u32> = None;
        for (i, n) in self.nodes.iter().enumerate() {
            if n.dead {
                continue;
            }
            match best {
                None => best = Some(i as u32),
                Some(b) => {
                    let bn = &self.nodes[b as usize];
                    if n.level > bn.level || (n.level == bn.level && n.id < bn.id) {
                        best = Some(i as u32);
                    }
                }
            }
        }
        best
    }

    /// Rewrites the graph without tombstones by re-inserting live nodes in
    /// their original insertion order. Levels are id-derived, so the
    /// rebuild is deterministic.
    pub fn compact(&mut self) {
        let params = self.params.clone();
        let live: Vec<IndexNode> = self
            .nodes
            .iter()
            .filter(|n| !n.dead)
            .map(|n| IndexNode {
                id: n.id.clone(),
                embedding: n.embedding.clone(),
                attr: n.attr,
                labels: self.label_names(&n.labels),
            })
            .collect();
        let mut fresh = FusionIndex::new(params).expect("params already validated");
        fresh.dim = self.dim;
        for node in live {
            fresh
                .insert(node)
                .expect("re-inserting live nodes cannot fail");
        }
        *self = fresh;
    }

    pub(crate) fn label_names(&self, bits: &LabelBits) -> Vec<String> {
        let mut names = Vec::new();
        for (i, name) in self.dict.names().iter().enumerate() {
            if bits.get(i as u32) {
                names.push(name.clone());
            }
        }
        names
    }

    /// Builds from scratch by sequential insertion; equivalent to calling
    /// [`FusionIndex::insert`] in the given order.
    pub fn build(
        &mut self,
        nodes: impl IntoIterator<Item = IndexNode>,
    ) -> Result<BuildReport, IndexError> {
        if !self.nodes.is_empty() {
            return Err(IndexError::NotEmpty);
        }
        for node in nodes {
            self.insert(node)?;
        }
        Ok(self.report())
    }

    pub fn report(&self) -> BuildReport {
        let mut histogram = vec![0usize; self.max_level + 1];
        let mut edges = 0usize;
        for n in &self.nodes {
            if n.dead {
                continue;
            }
            let lvl = (n.level as usize).min(self.max_level);
            histogram[lvl] += 1;
            edges += n.layers.iter().map(Vec::len).sum::<usize>();
        }
        BuildReport {
            nodes: self.live,
            edges,
            level_histogram: histogram,
        }
    }

    /// Updates the node's attribute. Adjacency copies referencing it go
    /// stale until [`FusionIndex::refresh_edge_metadata`] runs.
    pub fn set_attr(&mut self, id: &str, attr: f64) -> Result<(), IndexError> {
        let slot = self
            .live_slot(id)
            .ok_or_else(|| IndexError::UnknownId(id.to_string()))?;
        self.attr_dir_remove(slot);
        self.nodes[slot as usize].attr = attr;
        self.attr_dir_insert(slot);
        self.invalidate_span();
        Ok(())
    }

    pub fn set_labels(&mut self, id: &str, labels: &[String]) -> Result<(), IndexError> {
        let slot = self
            .live_slot(id)
            .ok_or_else(|| IndexError::UnknownId(id.to_string()))?;
        let bits = self.dict.bits_for(labels);
        self.nodes[slot as usize].labels = bits;
        Ok(())
    }

    /// Synchronizes every adjacency copy pointing at `id` with the node's
    /// current attribute and labels. Returns the number of copies updated.
    pub fn refresh_edge_metadata(&mut self, id: &str) -> Result<usize, IndexError> {
        let slot = self
            .live_slot(id)
            .ok_or_else(|| IndexError::UnknownId(id.to_string()))?;
        let attr = self.nodes[slot as usize].attr;
        let labels = self.nodes[slot as usize].labels.clone();
        let mut updated = 0usize;
        for i in 0..self.nodes.len() {
            if i == slot as usize {
                continue;
            }
            for layer in 0..self.nodes[i].layers.len() {
                let list = &mut self.nodes[i].layers[layer];
                if let Ok(pos) = list.binary_search_by_key(&slot, |e| e.neighbor) {
                    let e = &mut list[pos];
                    if e.attr != attr || e.labels != labels {
                        e.attr = attr;
                        e.labels = labels.clone();
                        updated += 1;
                    }
                }
            }
        }
        Ok(updated)
    }

    /// External-id adjacency of one node at a layer, for tests and tools.
    pub fn neighbors(&self, id: &str, layer: usize) -> Option<Vec<String>> {
        let slot = self.live_slot(id)?;
        let node = &self.nodes[slot as usize];
        let list = node.layers.get(layer)?;
        Some(
            list.iter()
                .map(|e| self.nodes[e.neighbor as usize].id.clone())
                .collect(),
        )
    }

    pub fn degree(&self, id: &str, layer: usize) -> Option<usize> {
        let slot = self.live_slot(id)?;
        self.nodes[slot as usize].layers.get(layer).map(Vec::len)
    }

    pub fn max_degree_observed(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !n.dead)
            .flat_map(|n| n.layers.iter())
            .map(Vec::len)
            .max()
            .unwrap_or(0)
    }

    /// Edge-set over external ids (layer, from, to), for determinism checks.
    pub fn edge_set(&self) -> std::collections::BTreeSet<(usize, String, String)> {
        let mut set = std::collections::BTreeSet::new();
        for n in &self.nodes {
            if n.dead {
                continue;
            }
            for (layer, list) in n.layers.iter().enumerate() {
                for e in list {
                    set.insert((
                        layer,
                        n.id.clone(),
                        self.nodes[e.neighbor as usize].id.clone(),
                    ));
                }
            }
        }
        set
    }

    pub fn live_ids(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| !n.dead)
            .map(|n| n.id.clone())
            .collect()
    }

    pub(crate) fn node(&self, slot: u32) -> &NodeData {
        &self.nodes[slot as usize]
    }

    fn attr_key(&self, slot: u32) -> (f64, &str) {
        let n = &self.nodes[slot as usize];
        (n.attr, n.id.as_str())
    }

    fn attr_dir_insert(&mut self, slot: u32) {
        let (attr, id) = {
            let n = &self.nodes[slot as usize];
            (n.attr, n.id.clone())
        };
        let pos = self.attr_dir.partition_point(|&s| {
            let (a, i) = self.attr_key(s);
            a.total_cmp(&attr).then_with(|| i.cmp(&id)) == std::cmp::Ordering::Less
        });
        self.attr_dir.insert(pos, slot);
    }

    fn attr_dir_remove(&mut self, slot: u32) {
        if let Some(pos) = self.attr_dir.iter().position(|&s| s == slot) {
            self.attr_dir.remove(pos);
        }
    }

    /// Live slots whose attribute lies in `[lo, hi]`, in (attr, id) order.
    /// Served by the sorted attribute directory, no distance evaluations.
    pub(crate) fn attr_range_slots(&self, lo: f64, hi: f64) -> impl Iterator<Item = u32> + '_ {
        let start = self
            .attr_dir
            .partition_point(|&s| self.nodes[s as usize].attr < lo);
        self.attr_dir[start..]
            .iter()
            .copied()
            .take_while(move |&s| self.nodes[s as usize].attr <= hi)
            .filter(|&s| !self.nodes[s as usize].dead)
    }

    /// All live slots in (attr, id) order.
    pub(crate) fn attr_all_slots(&self) -> impl Iterator<Item = u32> + '_ {
        self.attr_dir
            .iter()
            .copied()
            .filter(|&s| !self.nodes[s as usize].dead)
    }

    pub fn node_payload(&self, id: &str) -> Option<(Vec<f32>, f64, Vec<String>)> {
        let slot = self.live_slot(id)?;
        let n = &self.nodes[slot as usize];
        Some((n.embedding.clone(), n.attr, self.label_names(&n.labels)))
    }

    /// True when every live node is reachable from the entry point.
    /// Tombstoned nodes still serve as routing glue until compaction, so
    /// traversal passes through them.
    pub fn all_live_reachable(&self) -> bool {
        let Some(entry) = self.entry else {
            return self.live == 0;
        };
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = std::collections::VecDeque::new();
        seen[entry as usize] = true;
        queue.push_back(entry);
        let mut live_seen = 0usize;
        while let Some(slot) = queue.pop_front() {
            if !self.nodes[slot as usize].dead {
                live_seen += 1;
            }
            for layer in &self.nodes[slot as usize].layers {
                for e in layer {
                    if !seen[e.neighbor as usize] {
                        seen[e.neighbor as usize] = true;
                        queue.push_back(e.neighbor);
                    }
                }
            }
        }
        live_seen == self.live
    }

    /// Verifies that every adjacency copy matches the referenced node.
    pub fn metadata_coherent(&self) -> bool {
        for n in &self.nodes {
            for layer in &n.layers {
                for e in layer {
                    let target = &self.nodes[e.neighbor as usize];
                    if e.attr != target.attr || e.labels != target.labels {
                        return false;
                    }
                }
            }
        }
        true
    }
}
