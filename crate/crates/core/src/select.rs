//! Task-aligned data selection: utility scoring, dedup, slice coverage and
//! leakage-safe train/validation/serving segmentation.
//!
//! Utility is `0.4 * wellformed + 0.3 * diversity + 0.3 * slice_boost`.
//! Exact duplicates of an already-selected record score 0; records with
//! wellformedness below 0.2 are excluded outright as low-signal. Selection
//! is greedy with deterministic ties (record id), so the same dataset,
//! spec and seed always produce the same working set.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Dataset, Record, Value};
use crate::util::{fnv1a64, sha256_hex, splitmix64, unit_from_hash};

const W_WELLFORMED: f64 = 0.4;
const W_DIVERSITY: f64 = 0.3;
const W_SLICE: f64 = 0.3;
const LOW_SIGNAL_THRESHOLD: f64 = 0.2;
const SEGMENT_SALT: u64 = 0x5e67_ab41_9c33_d102;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("dataset has no live records")]
    EmptyDataset,
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("spec hash mismatch: working set was built from a different spec; run a new selection")]
    SpecMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub serve: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.15,
            serve: 0.15,
        }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<(), SelectError> {
        if self.train <= 0.0 || self.val <= 0.0 || self.serve <= 0.0 {
            return Err(SelectError::BadSpec(
                "split fractions must be positive".into(),
            ));
        }
        if (self.train + self.val + self.serve - 1.0).abs() > 1e-9 {
            return Err(SelectError::BadSpec("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub target: String,
    pub metric: String,
    pub budget: usize,
    #[serde(default)]
    pub slice_keys: Vec<String>,
    #[serde(default = "default_dedup_threshold")]
    pub dedup_threshold: f64,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub entity_key: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

fn default_dedup_threshold() -> f64 {
    0.95
}

impl SelectionSpec {
    pub fn new(target: impl Into<String>, metric: impl Into<String>, budget: usize) -> Self {
        SelectionSpec {
            target: target.into(),
            metric: metric.into(),
            budget,
            slice_keys: Vec::new(),
            dedup_threshold: default_dedup_threshold(),
            split: SplitFractions::default(),
            entity_key: None,
            seed: 0,
        }
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<(), SelectError> {
        if self.budget == 0 {
            return Err(SelectError::BadSpec("budget must be at least 1".into()));
        }
        self.split.validate()?;
        let descriptor = dataset.descriptor();
        for field in std::iter::once(&self.target)
            .chain(self.slice_keys.iter())
            .chain(self.entity_key.iter())
        {
            if descriptor.field(field).is_none() {
                return Err(SelectError::UnknownField(field.clone()));
            }
        }
        Ok(())
    }

    /// Canonical hash of the spec; manifests carry it so refreshes can
    /// verify comparability.
    pub fn spec_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }

    fn task_fields(&self) -> Vec<String> {
        let mut fields: Vec<String> = vec![self.target.clone()];
        for f in self.slice_keys.iter().chain(self.entity_key.iter()) {
            if !fields.contains(f) {
                fields.push(f.clone());
            }
        }
        fields
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Train,
    Val,
    Serve,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Member {
    pub record_id: String,
    pub weight: f64,
    pub segment: Segment,
}

/// The selected, segmented working set plus its provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorkingSet {
    pub manifest_id: String,
    pub spec_hash: String,
    pub source_snapshot: String,
    pub version: u32,
    pub members: Vec<Member>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl WorkingSet {
    pub fn member(&self, record_id: &str) -> Option<&Member> {
        self.members.iter().find(|m| m.record_id == record_id)
    }

    pub fn segment_ids(&self, segment: Segment) -> Vec<&str> {
        self.members
            .iter()
            .filter(|m| m.segment == segment)
            .map(|m| m.record_id.as_str())
            .collect()
    }

    fn finalize(mut self) -> Self {
        self.manifest_id = String::new();
        let body = serde_json::to_string(&self).expect("manifest serializes");
        self.manifest_id = sha256_hex(body.as_bytes());
        self
    }
}

/// Fraction of the task fields that are non-null on the record.
pub fn wellformedness(record: &Record, task_fields: &[String]) -> f64 {
    if task_fields.is_empty() {
        return 1.0;
    }
    let present = task_fields
        .iter()
        .filter(|f| record.values.get(*f).map(|v| !v.is_null()).unwrap_or(false))
        .count();
    present as f64 / task_fields.len() as f64
}

fn normalized_vector(record: &Record, field: &str) -> Option<Vec<f32>> {
    let v = record.values.get(field)?.as_vector()?;
    let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm == 0.0 {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y) as f64).sum()
}

fn slice_key(record: &Record, keys: &[String]) -> String {
    let mut s = String::new();
    for k in keys {
        s.push_str(k);
        s.push('=');
        match record.values.get(k) {
            Some(Value::Text(t)) => s.push_str(t),
            Some(Value::Number(n)) => s.push_str(&n.to_string()),
            _ => s.push('∅'),
        }
        s.push('|');
    }
    s
}

struct CandidateState {
    record_id: String,
    wellformed: f64,
    content_hash: u64,
    vector: Option<Vec<f32>>,
    slice: String,
    /// Highest similarity to any selected record so far.
    max_sim: f64,
    selected: bool,
}

struct Scorer<'a> {
    candidates: Vec<CandidateState>,
    selected_hashes: HashSet<u64>,
    slice_counts: HashMap<String, usize>,
    n_slices: usize,
    budget: usize,
    dedup_threshold: f64,
    records: Vec<&'a Record>,
}

impl<'a> Scorer<'a> {
    fn new(records: Vec<&'a Record>, dataset: &Dataset, spec: &SelectionSpec) -> Self {
        let task_fields = spec.task_fields();
        let vector_field = dataset.descriptor().vector_field().map(|f| f.name.clone());
        let candidates: Vec<CandidateState> = records
            .iter()
            .map(|r| CandidateState {
                record_id: r.record_id.clone(),
                wellformed: wellformedness(r, &task_fields),
                content_hash: r.content_hash(),
                vector: vector_field.as_deref().and_then(|f| normalized_vector(r, f)),
                slice: slice_key(r, &spec.slice_keys),
                max_sim: 0.0,
                selected: false,
            })
            .collect();
        let n_slices = candidates
            .iter()
            .map(|c| c.slice.as_str())
            .collect::<HashSet<_>>()
            .len()
            .max(1);
        Scorer {
            candidates,
            selected_hashes: HashSet::new(),
            slice_counts: HashMap::new(),
            n_slices,
            budget: spec.budget,
            dedup_threshold: spec.dedup_threshold,
            records,
        }
    }

    fn slice_boost(&self, slice: &str) -> f64 {
        let quota = self.budget as f64 / self.n_slices as f64;
        let fill = *self.slice_counts.get(slice).unwrap_or(&0) as f64 / quota.max(1e-12);
        1.0 / (1.0 + fill)
    }

    fn utility(&self, i: usize) -> f64 {
        let c = &self.candidates[i];
        if c.selected || self.selected_hashes.contains(&c.content_hash) {
            return 0.0;
        }
        let diversity = if c.max_sim >= self.dedup_threshold {
            (1.0 - c.max_sim).max(0.0)
        } else {
            1.0
        };
        W_WELLFORMED * c.wellformed + W_DIVERSITY * diversity + W_SLICE * self.slice_boost(&c.slice)
    }

    fn observe_selected_vector(&mut self, v: &[f32]) {
        for c in self.candidates.iter_mut() {
            if c.selected {
                continue;
            }
            if let Some(cv) = &c.vector {
                let sim = cosine(cv, v);
                if sim > c.max_sim {
                    c.max_sim = sim;
                }
            }
        }
    }

    fn mark_selected(&mut self, i: usize) {
        self.candidates[i].selected = true;
        self.selected_hashes.insert(self.candidates[i].content_hash);
        *self
            .slice_counts
            .entry(self.candidates[i].slice.clone())
            .or_insert(0) += 1;
        if let Some(v) = self.candidates[i].vector.clone() {
            self.observe_selected_vector(&v);
        }
    }
}

/// Per-record utility under the given selection state: the scoring rule
/// exposed directly. `already_selected` lists records a greedy pass has
/// locked in so far.
pub fn score_records(
    dataset: &Dataset,
    spec: &SelectionSpec,
    already_selected: &[&Record],
) -> Result<Vec<(String, f64)>, SelectError> {
    spec.validate(dataset)?;
    let live: Vec<&Record> = dataset.live_records().collect();
    let mut scorer = Scorer::new(live, dataset, spec);
    let vector_field = dataset.descriptor().vector_field().map(|f| f.name.clone());
    for r in already_selected {
        scorer.selected_hashes.insert(r.content_hash());
        *scorer
            .slice_counts
            .entry(slice_key(r, &spec.slice_keys))
            .or_insert(0) += 1;
        if let Some(v) = vector_field.as_deref().and_then(|f| normalized_vector(r, f)) {
            scorer.observe_selected_vector(&v);
        }
    }
    Ok((0..scorer.candidates.len())
        .map(|i| (scorer.candidates[i].record_id.clone(), scorer.utility(i)))
        .collect())
}

/// Greedy utility selection plus leakage-safe segmentation.
pub fn select(dataset: &Dataset, spec: &SelectionSpec) -> Result<WorkingSet, SelectError> {
    spec.validate(dataset)?;
    let live: Vec<&Record> = dataset.live_records().collect();
    if live.is_empty() {
        return Err(SelectError::EmptyDataset);
    }
    let (members, warnings) = greedy_select(live, dataset, spec, None)?;
    Ok(WorkingSet {
        manifest_id: String::new(),
        spec_hash: spec.spec_hash(),
        source_snapshot: format!("{}@{}", dataset.descriptor().dataset_id, dataset.row_count()),
        version: 1,
        members,
        warnings,
    }
    .finalize())
}

/// Re-runs selection over retained members plus new candidates. Members
/// that survive keep their segment (comparability across runs); the
/// manifest version increments.
pub fn refresh(
    working_set: &WorkingSet,
    dataset: &Dataset,
    delta: &[Record],
    spec: &SelectionSpec,
) -> Result<WorkingSet, SelectError> {
    if working_set.spec_hash != spec.spec_hash() {
        return Err(SelectError::SpecMismatch);
    }
    let mut pool: Vec<&Record> = Vec::new();
    let mut warnings = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for m in &working_set.members {
        match dataset.record(&m.record_id) {
            Some(r) => {
                pool.push(r);
                seen.insert(r.record_id.as_str());
            }
            None => warnings.push(format!("member `{}` no longer live; dropped", m.record_id)),
        }
    }
    for r in delta {
        if let Some(live) = dataset.record(&r.record_id) {
            if seen.insert(live.record_id.as_str()) {
                pool.push(live);
            }
        }
    }
    if pool.is_empty() {
        return Err(SelectError::EmptyDataset);
    }
    let retained: BTreeMap<&str, Segment> = working_set
        .members
        .iter()
        .map(|m| (m.record_id.as_str(), m.segment))
        .collect();
    let (members, mut more_warnings) = greedy_select(pool, dataset, spec, Some(&retained))?;
    warnings.append(&mut more_warnings);
    Ok(WorkingSet {
        manifest_id: String::new(),
        spec_hash: working_set.spec_hash.clone(),
        source_snapshot: format!("{}@{}", dataset.descriptor().dataset_id, dataset.row_count()),
        version: working_set.version + 1,
        members,
        warnings,
    }
    .finalize())
}

fn greedy_select(
    pool: Vec<&Record>,
    dataset: &Dataset,
    spec: &SelectionSpec,
    prior_segments: Option<&BTreeMap<&str, Segment>>,
) -> Result<(Vec<Member>, Vec<String>), SelectError> {
    let mut warnings = Vec::new();
    let total = pool.len();

    let task_fields = spec.task_fields();
    let eligible: Vec<&Record> = pool
        .into_iter()
        .filter(|r| wellformedness(r, &task_fields) >= LOW_SIGNAL_THRESHOLD)
        .collect();
    let excluded = total - eligible.len();
    if excluded > 0 {
        warnings.push(format!("{excluded} low-signal records excluded"));
    }
    if spec.budget >= eligible.len() {
        warnings.push(format!(
            "budget {} covers all {} eligible rows",
            spec.budget,
            eligible.len()
        ));
    }

    let mut scorer = Scorer::new(eligible, dataset, spec);
    let mut chosen: Vec<(usize, f64)> = Vec::new();
    while chosen.len() < spec.budget {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..scorer.candidates.len() {
            if scorer.candidates[i].selected {
                continue;
            }
            let u = scorer.utility(i);
            if u <= 0.0 {
                continue;
            }
            match best {
                None => best = Some((i, u)),
                Some((bi, bu)) => {
                    if u > bu
                        || (u == bu
                            && scorer.candidates[i].record_id < scorer.candidates[bi].record_id)
                    {
                        best = Some((i, u));
                    }
                }
            }
        }
        let Some((i, u)) = best else {
            if chosen.len() < scorer.candidates.len() {
                warnings.push(format!(
                    "budget shortfall: {} of {} requested (duplicates score zero)",
                    chosen.len(),
                    spec.budget
                ));
            }
            break;
        };
        scorer.mark_selected(i);
        chosen.push((i, u));
    }

    let selected_records: Vec<(&Record, f64)> = chosen
        .iter()
        .map(|&(i, u)| (scorer.records[i], u))
        .collect();
    let members = assign_segments(selected_records, spec, prior_segments);
    Ok((members, warnings))
}

fn assign_segments(
    selected: Vec<(&Record, f64)>,
    spec: &SelectionSpec,
    prior_segments: Option<&BTreeMap<&str, Segment>>,
) -> Vec<Member> {
    // Unit of assignment: the entity when an entity key is set, else the
    // record itself. No entity ever spans two segments.
    let unit_of = |r: &Record| -> String {
        match &spec.entity_key {
            Some(k) => match r.values.get(k) {
                Some(v) if !v.is_null() => {
                    let mut buf = Vec::new();
                    v.canonical_bytes(&mut buf);
                    format!("e:{}", fnv1a64(&buf))
                }
                _ => format!("r:{}", r.record_id),
            },
            None => format!("r:{}", r.record_id),
        }
    };

    struct Unit<'r> {
        max_ts: i64,
        records: Vec<(&'r Record, f64)>,
        fixed: Option<Segment>,
    }

    let mut units: BTreeMap<String, Unit> = BTreeMap::new();
    for (r, w) in selected {
        let uid = unit_of(r);
        let unit = units.entry(uid).or_insert(Unit {
            max_ts: i64::MIN,
            records: Vec::new(),
            fixed: None,
        });
        unit.max_ts = unit.max_ts.max(r.timestamp);
        if let Some(prior) = prior_segments {
            if let Some(seg) = prior.get(r.record_id.as_str()) {
                // Retained members pin their unit's segment.
                unit.fixed = Some(*seg);
            }
        }
        unit.records.push((r, w));
    }

    let total_records: usize = units.values().map(|u| u.records.len()).sum();
    let has_time = units.values().any(|u| u.max_ts != 0 && u.max_ts != i64::MIN);

    // Serve segment: latest time quantile when timestamps exist, seeded
    // hash order otherwise. Units are taken whole.
    let mut order: Vec<String> = units.keys().cloned().collect();
    if has_time {
        order.sort_by(|a, b| {
            units[a]
                .max_ts
                .cmp(&units[b].max_ts)
                .then_with(|| a.cmp(b))
        });
    } else {
        order.sort_by_key(|u| (splitmix64(fnv1a64(u.as_bytes()) ^ spec.seed), u.clone()));
    }
    let serve_target = (spec.split.serve * total_records as f64).round() as usize;
    let mut serve_units: HashSet<String> = HashSet::new();
    let mut serve_count = 0usize;
    for uid in order.iter().rev() {
        if serve_count >= serve_target {
            break;
        }
        if units[uid].fixed.is_some() {
            continue;
        }
        serve_count += units[uid].records.len();
        serve_units.insert(uid.clone());
    }

    let train_share = spec.split.train / (spec.split.train + spec.split.val);
    let mut members = Vec::new();
    for (uid, unit) in &units {
        let segment = match unit.fixed {
            Some(seg) => seg,
            None if serve_units.contains(uid) => Segment::Serve,
            None => {
                let u = unit_from_hash(splitmix64(fnv1a64(uid.as_bytes()) ^ spec.seed ^ SEGMENT_SALT));
                if u <= train_share {
                    Segment::Train
                } else {
                    Segment::Val
                }
            }
        };
        for (r, w) in &unit.records {
            members.push(Member {
                record_id: r.record_id.clone(),
                weight: w.clamp(1e-6, 1.0),
                segment,
            });
        }
    }
    members.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    members
}
