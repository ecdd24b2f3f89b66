//! Constraint-aware search over the fusion index.
//!
//! A query carries a [`ConstraintProfile`] (hard numeric range plus label
//! predicate) and [`RankWeights`] for the fused score. Traversal restricts
//! expansion to a query-specific subgraph: adjacency metadata copies are
//! tested before a neighbor's payload is ever touched, and nodes violating
//! the hard constraints are only usable as routing hops, at most
//! `relaxation_budget` consecutive ones, and are never emitted. Results are
//! ranked by `w_sim * sim + w_range * range_fit + w_label * label_cov`.
//!
//! [`brute_force`] is the exact oracle over the same scoring rule; the two
//! paths are kept independent so one can check the other.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Dataset, LabelMode, Value};
use crate::index::{FusionIndex, IndexError, LabelBits, PartitionedIndex};
use crate::par::{self, ExecMode};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("k must be at least 1")]
    BadK,
    #[error("ef_search must be at least k")]
    BadEf,
    #[error("invalid weights: {0}")]
    BadWeights(String),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Normalized task filter over the indexed dataset's attribute and labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "op")]
pub enum Filter {
    AttrAtLeast { value: f64 },
    AttrAtMost { value: f64 },
    AttrBetween { lo: f64, hi: f64 },
    HasLabels { labels: Vec<String>, mode: LabelMode },
}

/// The canonical hard predicate derived from a task's filters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintProfile {
    pub range: Option<(f64, f64)>,
    pub labels: Vec<String>,
    pub label_mode: LabelMode,
    /// Maximum consecutive constraint-violating routing hops.
    pub relaxation_budget: usize,
    /// Set when the folded numeric predicates have an empty intersection.
    pub unsatisfiable: bool,
}

impl ConstraintProfile {
    pub fn unconstrained() -> Self {
        ConstraintProfile::default()
    }

    pub fn is_unconstrained(&self) -> bool {
        self.range.is_none() && self.labels.is_empty() && !self.unsatisfiable
    }
}

/// Folds filters into one profile: numeric predicates intersect into a
/// single interval, label predicates union into one set. A contradictory
/// range yields a profile flagged unsatisfiable rather than an error. If
/// any label filter requires ALL, the folded mode is ALL.
pub fn derive_profile(filters: &[Filter]) -> ConstraintProfile {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut has_range = false;
    let mut labels: Vec<String> = Vec::new();
    let mut mode = LabelMode::Any;
    for f in filters {
        match f {
            Filter::AttrAtLeast { value } => {
                lo = lo.max(*value);
                has_range = true;
            }
            Filter::AttrAtMost { value } => {
                hi = hi.min(*value);
                has_range = true;
            }
            Filter::AttrBetween { lo: l, hi: h } => {
                lo = lo.max(*l);
                hi = hi.min(*h);
                has_range = true;
            }
            Filter::HasLabels { labels: ls, mode: m } => {
                for l in ls {
                    if !labels.contains(l) {
                        labels.push(l.clone());
                    }
                }
                if *m == LabelMode::All {
                    mode = LabelMode::All;
                }
            }
        }
    }
    let unsatisfiable = has_range && lo > hi;
    ConstraintProfile {
        range: if has_range && !unsatisfiable {
            Some((lo, hi))
        } else {
            None
        },
        labels,
        label_mode: mode,
        relaxation_budget: 0,
        unsatisfiable,
    }
}

/// Ranker weights; must be non-negative and sum to 1 within 1e-9.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankWeights {
    pub w_sim: f64,
    pub w_range: f64,
    pub w_label: f64,
}

impl Default for RankWeights {
    fn default() -> Self {
        RankWeights {
            w_sim: 0.7,
            w_range: 0.15,
            w_label: 0.15,
        }
    }
}

impl RankWeights {
    pub fn new(w_sim: f64, w_range: f64, w_label: f64) -> Result<Self, SearchError> {
        let w = RankWeights {
            w_sim,
            w_range,
            w_label,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.w_sim < 0.0 || self.w_range < 0.0 || self.w_label < 0.0 {
            return Err(SearchError::BadWeights("weights must be non-negative".into()));
        }
        let sum = self.w_sim + self.w_range + self.w_label;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SearchError::BadWeights(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// A scored result. Every returned candidate satisfies the profile's hard
/// constraints; the score decomposes exactly into the stored components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub node_id: String,
    pub sim: f64,
    pub range_fit: f64,
    pub label_cov: f64,
    pub score: f64,
    pub evidence: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub candidates: Vec<Candidate>,
    /// Nodes whose distance was evaluated.
    pub visited: usize,
    /// Relaxation budget in effect for the final pass.
    pub relaxation_used: usize,
    pub diagnostic: Option<String>,
}

/// Range fit of an in-range attribute: 1 at the interval midpoint, 0 at the
/// endpoints; 1 when there is no range or the interval is degenerate.
pub fn range_fit(attr: f64, range: Option<(f64, f64)>) -> f64 {
    match range {
        None => 1.0,
        Some((lo, hi)) => {
            if hi <= lo {
                return 1.0;
            }
            let mid = (lo + hi) / 2.0;
            let half = (hi - lo) / 2.0;
            (1.0 - (attr - mid).abs() / half).clamp(0.0, 1.0)
        }
    }
}

/// Fraction of the profile's labels carried by the node; 1 when the
/// profile has no labels.
pub fn label_coverage(node_labels: &LabelBits, profile_bits: &LabelBits, profile_len: usize) -> f64 {
    if profile_len == 0 {
        return 1.0;
    }
    node_labels.intersection_count(profile_bits) as f64 / profile_len as f64
}

struct Resolved {
    range: Option<(f64, f64)>,
    bits: LabelBits,
    /// Number of labels in the profile (including names unknown to this
    /// partition's dictionary, which can never match).
    label_len: usize,
    /// Count of profile labels that resolved against the dictionary.
    resolved_len: usize,
    mode: LabelMode,
}

impl Resolved {
    fn new(index: &FusionIndex, profile: &ConstraintProfile) -> Self {
        let bits = index.dict().resolve(&profile.labels);
        let resolved_len = bits.count() as usize;
        Resolved {
            range: profile.range,
            bits,
            label_len: profile.labels.len(),
            resolved_len,
            mode: profile.label_mode,
        }
    }

    fn range_ok(&self, attr: f64) -> bool {
        match self.range {
            None => true,
            Some((lo, hi)) => attr >= lo && attr <= hi,
        }
    }

    /// Full hard predicate (mode-aware), for emission decisions.
    fn hard_ok(&self, attr: f64, labels: &LabelBits) -> bool {
        if !self.range_ok(attr) {
            return false;
        }
        if self.label_len == 0 {
            return true;
        }
        match self.mode {
            LabelMode::Any => labels.intersects(&self.bits),
            LabelMode::All => {
                // Labels unknown to the dictionary exist on no node.
                self.resolved_len == self.label_len && labels.contains_all(&self.bits)
            }
        }
    }

    /// Edge-metadata gate used during expansion. ALL mode prunes like ANY
    /// (some overlap) and relies on the final filter for exactness.
    fn edge_ok(&self, attr: f64, labels: &LabelBits) -> bool {
        if !self.range_ok(attr) {
            return false;
        }
        if self.label_len == 0 {
            return true;
        }
        labels.intersects(&self.bits)
    }

    /// Score components (sim, range_fit, label_cov). Out-of-range
    /// attributes contribute a zero fit so violating routing nodes have a
    /// well-defined provisional ordering.
    fn components(&self, metric_sim: f64, attr: f64, labels: &LabelBits) -> (f64, f64, f64) {
        let fit = if self.range_ok(attr) {
            range_fit(attr, self.range)
        } else {
            0.0
        };
        let cov = label_coverage(labels, &self.bits, self.label_len);
        (metric_sim, fit, cov)
    }
}

/// Constraint-guided search over one partition.
pub fn search(
    index: &FusionIndex,
    query: &[f32],
    k: usize,
    profile: &ConstraintProfile,
    weights: &RankWeights,
    ef_search: usize,
) -> Result<SearchOutcome, SearchError> {
    if k == 0 {
        return Err(SearchError::BadK);
    }
    if ef_search < k {
        return Err(SearchError::BadEf);
    }
    weights.validate()?;
    if let Some(dim) = index.dim() {
        if query.len() != dim {
            return Err(SearchError::Index(IndexError::DimensionMismatch {
                expected: dim,
                actual: query.len(),
            }));
        }
    }
    if profile.unsatisfiable {
        return Ok(SearchOutcome {
            candidates: Vec::new(),
            visited: 0,
            relaxation_used: profile.relaxation_budget,
            diagnostic: Some("unsatisfiable".into()),
        });
    }
    if index.is_empty() {
        return Ok(SearchOutcome::default());
    }

    let resolved = Resolved::new(index, profile);
    let constrained = resolved.range.is_some() || resolved.label_len > 0;

    // Adaptive strategy. The attribute directory and label bitmaps expose
    // the satisfying population without any distance work; when that
    // working subgraph is small it is evaluated exactly, which both
    // maximizes precision and visits strictly fewer nodes than a beam.
    // Dense profiles fall through to constraint-guided graph expansion.
    let (mut candidates, visited, relaxation_used) = if constrained {
        let satisfying: Vec<u32> = match resolved.range {
            Some((lo, hi)) => index
                .attr_range_slots(lo, hi)
                .filter(|&s| {
                    let n = index.node(s);
                    resolved.hard_ok(n.attr, &n.labels)
                })
                .collect(),
            None => index
                .attr_all_slots()
                .filter(|&s| {
                    let n = index.node(s);
                    resolved.hard_ok(n.attr, &n.labels)
                })
                .collect(),
        };
        if satisfying.len() <= flat_scan_limit(ef_search) {
            let mut visited = 0usize;
            let mut scored = Vec::with_capacity(satisfying.len());
            for slot in satisfying {
                let node = index.node(slot);
                if node.dead {
                    continue;
                }
                let dist = index.dist_to(query, slot);
                visited += 1;
                let sim = index.params().metric.similarity(dist);
                let (sim, fit, cov) = resolved.components(sim, node.attr, &node.labels);
                let score = weights.w_sim * sim + weights.w_range * fit + weights.w_label * cov;
                scored.push(Candidate {
                    node_id: node.id.clone(),
                    sim,
                    range_fit: fit,
                    label_cov: cov,
                    score,
                    evidence: Some(node.id.clone()),
                });
            }
            (scored, visited, profile.relaxation_budget)
        } else {
            constrained_beam(index, query, k, &resolved, weights, ef_search, profile.relaxation_budget)
        }
    } else {
        constrained_beam(index, query, k, &resolved, weights, ef_search, profile.relaxation_budget)
    };

    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.node_id.cmp(&b.node_id))
    });
    candidates.truncate(k);
    let diagnostic = if candidates.is_empty() {
        Some("unsatisfiable".into())
    } else {
        None
    };
    Ok(SearchOutcome {
        candidates,
        visited,
        relaxation_used,
        diagnostic,
    })
}

/// A beam at width `ef` evaluates at least this many distances in
/// practice, so scanning a satisfying population up to the limit is never
/// more expensive than traversing toward it.
fn flat_scan_limit(ef_search: usize) -> usize {
    8 * ef_search.max(16)
}

fn constrained_beam(
    index: &FusionIndex,
    query: &[f32],
    k: usize,
    resolved: &Resolved,
    weights: &RankWeights,
    ef_search: usize,
    initial_budget: usize,
) -> (Vec<Candidate>, usize, usize) {
    use std::collections::BinaryHeap;

    #[derive(PartialEq)]
    struct QItem {
        score: f64,
        slot: u32,
        chain: usize,
    }
    impl Eq for QItem {}
    impl PartialOrd for QItem {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for QItem {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.score
                .total_cmp(&other.score)
                .then_with(|| other.slot.cmp(&self.slot))
        }
    }

    #[derive(PartialEq)]
    struct RItem {
        score: f64,
        slot: u32,
        sim: f64,
        fit: f64,
        cov: f64,
    }
    impl Eq for RItem {}
    impl PartialOrd for RItem {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for RItem {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            // Min-heap by score via Reverse at the call sites is avoided by
            // inverting here: the heap keeps the WORST result on top.
            other
                .score
                .total_cmp(&self.score)
                .then_with(|| self.slot.cmp(&other.slot))
        }
    }

    let Some(entry) = index.entry else {
        return (Vec::new(), 0, initial_budget);
    };
    let mut visited = vec![false; index.nodes.len()];
    let mut count = 0usize;

    // Greedy descent to layer 1; constraint handling happens on layer 0
    // where nearly all traversal work is.
    let mut ep = entry;
    count += 1;
    for layer in (1..=index.max_level).rev() {
        ep = index.greedy_closest_counting(query, ep, layer, &mut count);
    }
    // Safety valve: exploration stays proportional to the beam width even
    // when the satisfying population cannot fill it.
    let visit_cap = count + 8 * ef_search.max(k);

    let score_of = |slot: u32, dist: f32| -> (f64, f64, f64, f64) {
        let node = index.node(slot);
        let sim = index.params().metric.similarity(dist);
        let (sim, fit, cov) = resolved.components(sim, node.attr, &node.labels);
        let score = weights.w_sim * sim + weights.w_range * fit + weights.w_label * cov;
        (score, sim, fit, cov)
    };

    let mut frontier: BinaryHeap<QItem> = BinaryHeap::new();
    let mut results: BinaryHeap<RItem> = BinaryHeap::new();

    // Visits the node (one distance evaluation), records it as a result
    // when it satisfies the hard predicate, and optionally queues it for
    // expansion. Returns the node's true fused score.
    let admit = |slot: u32,
                 chain: usize,
                 score_hint: Option<f64>,
                 expand: bool,
                 count: &mut usize,
                 frontier: &mut BinaryHeap<QItem>,
                 results: &mut BinaryHeap<RItem>|
     -> f64 {
        let node = index.node(slot);
        let satisfies = resolved.hard_ok(node.attr, &node.labels);
        let dist = index.dist_to(query, slot);
        *count += 1;
        let (score, sim, fit, cov) = score_of(slot, dist);
        if satisfies && !node.dead {
            results.push(RItem {
                score,
                slot,
                sim,
                fit,
                cov,
            });
            if results.len() > ef_search {
                results.pop();
            }
        }
        if expand {
            let chain = if satisfies { 0 } else { chain };
            frontier.push(QItem {
                score: score_hint.unwrap_or(score),
                slot,
                chain,
            });
        }
        score
    };

    let mut budget = initial_budget;
    let mut relaxation_used = initial_budget;

    // Seed with the descent endpoint if admissible under the budget.
    {
        let node = index.node(ep);
        let satisfies = resolved.hard_ok(node.attr, &node.labels);
        if satisfies || budget >= 1 {
            visited[ep as usize] = true;
            admit(ep, 1, None, true, &mut count, &mut frontier, &mut results);
        }
    }
    // Two phases at most: the given budget, then a best-effort resumption
    // with budget 2 when fewer than k results were reachable. The second
    // phase continues from the first phase's state instead of
    // re-exploring.
    loop {
        while let Some(QItem { score, slot, chain }) = frontier.pop() {
            if count >= visit_cap {
                break;
            }
            if results.len() >= ef_search {
                if let Some(worst) = results.peek() {
                    if score < worst.score {
                        break;
                    }
                }
            }
            let node = index.node(slot);
            let Some(layer0) = node.layers.first() else {
                continue;
            };
            for e in layer0 {
                if visited[e.neighbor as usize] {
                    continue;
                }
                // Metadata copies gate expansion before the payload is read.
                if resolved.edge_ok(e.attr, &e.labels) {
                    visited[e.neighbor as usize] = true;
                    admit(e.neighbor, chain, None, true, &mut count, &mut frontier, &mut results);
                } else if chain < budget {
                    // Routing hop through a violating node: inherits a
                    // slightly discounted priority; the real score is
                    // computed on visit.
                    visited[e.neighbor as usize] = true;
                    admit(
                        e.neighbor,
                        chain + 1,
                        Some(score * 0.999),
                        true,
                        &mut count,
                        &mut frontier,
                        &mut results,
                    );
                }
            }
        }
        if results.len() >= k || budget >= 2 || count >= visit_cap {
            break;
        }
        // Auto-raise: allow short routing chains and resume. Nodes already
        // expanded are re-queued so their skipped violating neighbors
        // become reachable.
        budget = 2;
        relaxation_used = 2;
        frontier.clear();
        for r in &results {
            frontier.push(QItem {
                score: r.score,
                slot: r.slot,
                chain: 0,
            });
        }
        let node = index.node(ep);
        let satisfies = resolved.hard_ok(node.attr, &node.labels);
        if satisfies || budget >= 1 {
            if !visited[ep as usize] {
                visited[ep as usize] = true;
                admit(ep, 1, None, true, &mut count, &mut frontier, &mut results);
            } else {
                let (score, _, _, _) = score_of(ep, index.dist_to(query, ep));
                frontier.push(QItem {
                    score,
                    slot: ep,
                    chain: if satisfies { 0 } else { 1 },
                });
            }
        }
    }

    let candidates = results
        .into_iter()
        .map(|r| Candidate {
            node_id: index.node(r.slot).id.clone(),
            sim: r.sim,
            range_fit: r.fit,
            label_cov: r.cov,
            score: r.score,
            evidence: Some(index.node(r.slot).id.clone()),
        })
        .collect();
    (candidates, count, relaxation_used)
}

/// Exact constrained top-k by linear scan: the testing oracle. Applies the
/// same hard predicate, scoring rule and tie rule as [`search`], but never
/// touches the graph structure.
pub fn brute_force(
    index: &FusionIndex,
    query: &[f32],
    k: usize,
    profile: &ConstraintProfile,
    weights: &RankWeights,
) -> Result<Vec<Candidate>, SearchError> {
    brute_force_mode(ExecMode::auto(), index, query, k, profile, weights)
}

pub fn brute_force_mode(
    mode: ExecMode,
    index: &FusionIndex,
    query: &[f32],
    k: usize,
    profile: &ConstraintProfile,
    weights: &RankWeights,
) -> Result<Vec<Candidate>, SearchError> {
    weights.validate()?;
    if profile.unsatisfiable {
        return Ok(Vec::new());
    }
    let resolved = Resolved::new(index, profile);
    let slots: Vec<u32> = (0..index.nodes.len() as u32).collect();
    let scored = par::map(mode, &slots, |&slot| {
        let node = index.node(slot);
        if node.dead || !resolved.hard_ok(node.attr, &node.labels) {
            return None;
        }
        let dist = index.dist_to(query, slot);
        let sim = index.params().metric.similarity(dist);
        let (sim, fit, cov) = resolved.components(sim, node.attr, &node.labels);
        let score = weights.w_sim * sim + weights.w_range * fit + weights.w_label * cov;
        Some(Candidate {
            node_id: node.id.clone(),
            sim,
            range_fit: fit,
            label_cov: cov,
            score,
            evidence: Some(node.id.clone()),
        })
    });
    let mut out: Vec<Candidate> = scored.into_iter().flatten().collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.node_id.cmp(&b.node_id))
    });
    out.truncate(k);
    Ok(out)
}

/// Fan-out search across partitions with a deterministic merge.
pub fn search_partitioned(
    parts: &PartitionedIndex,
    query: &[f32],
    k: usize,
    profile: &ConstraintProfile,
    weights: &RankWeights,
    ef_search: usize,
) -> Result<SearchOutcome, SearchError> {
    let indexes: Vec<&FusionIndex> = parts.partitions().map(|(_, idx)| idx).collect();
    let outcomes = par::map(ExecMode::auto(), &indexes, |idx| {
        search(idx, query, k, profile, weights, ef_search)
    });
    let mut merged = SearchOutcome::default();
    let mut any_result = false;
    for outcome in outcomes {
        let o = outcome?;
        merged.visited += o.visited;
        merged.relaxation_used = merged.relaxation_used.max(o.relaxation_used);
        if !o.candidates.is_empty() {
            any_result = true;
        }
        merged.candidates.extend(o.candidates);
    }
    merged.candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.node_id.cmp(&b.node_id))
    });
    merged.candidates.truncate(k);
    if !any_result {
        merged.diagnostic = Some("unsatisfiable".into());
    }
    Ok(merged)
}

/// Record projection returned alongside a candidate.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvidenceSlice {
    pub values: BTreeMap<String, Value>,
    pub warning: Option<String>,
}

/// Projects the named fields of the candidate's catalog record. A dangling
/// node (record deleted) yields an empty slice with a warning.
pub fn evidence(candidate: &Candidate, dataset: &Dataset, fields: &[String]) -> EvidenceSlice {
    let Some(record) = dataset.record(&candidate.node_id) else {
        return EvidenceSlice {
            values: BTreeMap::new(),
            warning: Some(format!("record `{}` not found", candidate.node_id)),
        };
    };
    let mut values = BTreeMap::new();
    for f in fields {
        values.insert(
            f.clone(),
            record.values.get(f).cloned().unwrap_or(Value::Null),
        );
    }
    EvidenceSlice {
        values,
        warning: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{IndexNode, IndexParams};

    fn mini_index() -> FusionIndex {
        // Three hand-built nodes, dim 2, attr/labels chosen so scores can
        // be computed by hand.
        let mut index = FusionIndex::new(IndexParams::default()).unwrap();
        index
            .insert(IndexNode::new("a", vec![1.0, 0.0], 5.0).with_labels(vec!["red".into()]))
            .unwrap();
        index
            .insert(
                IndexNode::new("b", vec![0.0, 1.0], 0.0)
                    .with_labels(vec!["red".into(), "hot".into()]),
            )
            .unwrap();
        index
            .insert(IndexNode::new("c", vec![0.7071068, 0.7071068], 10.0))
            .unwrap();
        index
    }

    #[test]
    fn derive_profile_folds_ranges() {
        let p = derive_profile(&[
            Filter::AttrAtLeast { value: 3.0 },
            Filter::AttrAtMost { value: 7.0 },
        ]);
        assert_eq!(p.range, Some((3.0, 7.0)));
        assert!(!p.unsatisfiable);

        let p = derive_profile(&[
            Filter::AttrAtLeast { value: 7.0 },
            Filter::AttrAtMost { value: 3.0 },
        ]);
        assert!(p.unsatisfiable);

        let p = derive_profile(&[]);
        assert!(p.is_unconstrained());
    }

    #[test]
    fn range_fit_formula() {
        assert_eq!(range_fit(3.3, None), 1.0);
        // attr at midpoint -> 1, at an endpoint -> 0.
        assert_eq!(range_fit(5.0, Some((0.0, 10.0))), 1.0);
        assert_eq!(range_fit(0.0, Some((0.0, 10.0))), 0.0);
        // Spec example: range [0,10], attr 7.5 -> 0.5.
        assert_eq!(range_fit(7.5, Some((0.0, 10.0))), 0.5);
        // Degenerate interval.
        assert_eq!(range_fit(4.0, Some((4.0, 4.0))), 1.0);
    }

    #[test]
    fn label_coverage_formula() {
        let index = mini_index();
        let dict = index.dict();
        let node = dict.resolve(&["red".into(), "hot".into()]);
        let profile_one = dict.resolve(&["red".into()]);
        assert_eq!(label_coverage(&node, &profile_one, 1), 1.0);
        let profile_two = dict.resolve(&["red".into(), "hot".into()]);
        let node_one = dict.resolve(&["red".into()]);
        assert_eq!(label_coverage(&node_one, &profile_two, 2), 0.5);
        assert_eq!(label_coverage(&node_one, &LabelBits::default(), 0), 1.0);
    }

    #[test]
    fn oracle_matches_hand_computation() {
        let index = mini_index();
        let weights = RankWeights::default();
        let profile = ConstraintProfile {
            range: Some((0.0, 10.0)),
            labels: vec!["red".into()],
            label_mode: LabelMode::Any,
            ..Default::default()
        };
        let query = vec![1.0f32, 0.0];
        let got = brute_force(&index, &query, 3, &profile, &weights).unwrap();
        // Hand computation: c has no labels -> filtered out.
        // a: cos=1 -> sim=1; attr 5 mid of [0,10] -> fit 1; cov 1
        //    score = 0.7 + 0.15 + 0.15 = 1.0
        // b: cos=0 -> sim=0.5; attr 0 -> fit 0; cov 1
        //    score = 0.35 + 0 + 0.15 = 0.5
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].node_id, "a");
        assert!((got[0].score - 1.0).abs() < 1e-12);
        assert_eq!(got[1].node_id, "b");
        assert!((got[1].score - 0.5).abs() < 1e-12);
        // Score decomposition holds.
        for c in &got {
            let recomposed = 0.7 * c.sim + 0.15 * c.range_fit + 0.15 * c.label_cov;
            assert!((recomposed - c.score).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_when_nothing_satisfies() {
        let index = mini_index();
        let profile = ConstraintProfile {
            range: Some((100.0, 200.0)),
            ..Default::default()
        };
        let got = brute_force(&index, &[1.0, 0.0], 5, &profile, &RankWeights::default()).unwrap();
        assert!(got.is_empty());
        let out = search(
            &index,
            &[1.0, 0.0],
            5,
            &profile,
            &RankWeights::default(),
            16,
        )
        .unwrap();
        assert!(out.candidates.is_empty());
        assert_eq!(out.diagnostic.as_deref(), Some("unsatisfiable"));
    }

    #[test]
    fn unsatisfiable_profile_short_circuits() {
        let index = mini_index();
        let profile = derive_profile(&[
            Filter::AttrAtLeast { value: 7.0 },
            Filter::AttrAtMost { value: 3.0 },
        ]);
        let out = search(
            &index,
            &[1.0, 0.0],
            2,
            &profile,
            &RankWeights::default(),
            4,
        )
        .unwrap();
        assert!(out.candidates.is_empty());
        assert_eq!(out.visited, 0);
        assert_eq!(out.diagnostic.as_deref(), Some("unsatisfiable"));
    }

    #[test]
    fn evidence_projection() {
        use crate::catalog::{Catalog, DatasetDescriptor, FieldDef, FieldKind, Record};
        let catalog = Catalog::new();
        let h = catalog
            .register_dataset(DatasetDescriptor::new(
                "d",
                vec![
                    FieldDef {
                        name: "x".into(),
                        kind: FieldKind::Numeric,
                    },
                    FieldDef {
                        name: "note".into(),
                        kind: FieldKind::Text,
                    },
                ],
            ))
            .unwrap();
        let mut ds = h.write().unwrap();
        ds.ingest(vec![Record::new("a")
            .with("x", Value::Number(4.0))
            .with("note", Value::Text("keep".into()))]);

        let cand = Candidate {
            node_id: "a".into(),
            sim: 1.0,
            range_fit: 1.0,
            label_cov: 1.0,
            score: 1.0,
            evidence: Some("a".into()),
        };
        let slice = evidence(&cand, &ds, &["x".to_string(), "note".to_string()]);
        assert!(slice.warning.is_none());
        assert_eq!(slice.values.len(), 2);
        assert_eq!(slice.values["x"], Value::Number(4.0));

        // Deleted record -> empty slice with a warning.
        ds.tombstone("a");
        let slice = evidence(&cand, &ds, &["x".to_string()]);
        assert!(slice.values.is_empty());
        assert!(slice.warning.is_some());
    }

    #[test]
    fn weight_validation() {
        assert!(RankWeights::new(0.5, 0.25, 0.25).is_ok());
        assert!(RankWeights::new(0.5, 0.5, 0.5).is_err());
        assert!(RankWeights::new(-0.1, 0.6, 0.5).is_err());
    }
}
