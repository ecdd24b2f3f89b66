//! Operator binding: scoring candidates on expected accuracy, runtime,
//! index availability, batching feasibility, cache reuse and historical
//! telemetry; the best candidate is bound and the runner-up is retained
//! as a type-compatible fallback.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::operator::{OperatorSpec, Registry};
use super::{TaskError, TaskSpec};
use crate::catalog::Catalog;

const W_ACCURACY: f64 = 0.4;
const W_RUNTIME: f64 = 0.3;
const W_INDEX: f64 = 0.1;
const W_BATCHING: f64 = 0.1;
const W_CACHE: f64 = 0.05;
const W_TELEMETRY: f64 = 0.05;
/// Telemetry ages with a half-life of this many runs.
const TELEMETRY_HALF_LIFE_RUNS: f64 = 50.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundStep {
    pub step: String,
    pub primary: String,
    pub fallback: Option<String>,
    pub score: f64,
    /// (component, raw value, weighted contribution) per scored term.
    pub breakdown: Vec<(String, f64, f64)>,
    pub est_rows: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct OpTelemetry {
    runs: f64,
    ewma_wall_ms: f64,
}

/// Per-operator telemetry persisted as JSONL plus an exponentially aged
/// summary used by the binder.
pub struct TelemetryStore {
    root: Option<PathBuf>,
    state: Mutex<BTreeMap<String, OpTelemetry>>,
}

impl TelemetryStore {
    pub fn in_memory() -> Self {
        TelemetryStore {
            root: None,
            state: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn at(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut state = BTreeMap::new();
        for entry in fs::read_dir(&root)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("json") {
                if let Some(op) = path.file_stem().and_then(|s| s.to_str()) {
                    if let Ok(body) = fs::read(&path) {
                        if let Ok(t) = serde_json::from_slice::<OpTelemetry>(&body) {
                            state.insert(op.to_string(), t);
                        }
                    }
                }
            }
        }
        Ok(TelemetryStore {
            root: Some(root),
            state: Mutex::new(state),
        })
    }

    /// Records one run; appends to the operator's JSONL and refreshes the
    /// aged summary.
    pub fn record(&self, op: &str, wall_ms: f64, rows: u64) {
        let mut state = self.state.lock().unwrap();
        let entry = state.entry(op.to_string()).or_default();
        let alpha = 1.0 - 0.5f64.powf(1.0 / TELEMETRY_HALF_LIFE_RUNS);
        if entry.runs == 0.0 {
            entry.ewma_wall_ms = wall_ms;
        } else {
            entry.ewma_wall_ms += alpha * (wall_ms - entry.ewma_wall_ms);
        }
        entry.runs += 1.0;
        if let Some(root) = &self.root {
            let line = serde_json::json!({
                "op": op,
                "wall_ms": wall_ms,
                "rows": rows,
            });
            let _ = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(root.join(format!("{op}.jsonl")))
                .and_then(|mut f| {
                    use std::io::Write;
                    writeln!(f, "{line}")
                });
            let _ = fs::write(
                root.join(format!("{op}.json")),
                serde_json::to_vec(entry).unwrap_or_default(),
            );
        }
    }

    pub fn average_wall_ms(&self, op: &str) -> Option<f64> {
        let state = self.state.lock().unwrap();
        state.get(op).filter(|t| t.runs > 0.0).map(|t| t.ewma_wall_ms)
    }
}

fn score_candidate(
    op: &OperatorSpec,
    est_rows: f64,
    index_available: bool,
    telemetry: &TelemetryStore,
) -> (f64, Vec<(String, f64, f64)>) {
    let accuracy = op.expected_accuracy.clamp(0.0, 1.0);
    let cost_ms = op.estimated_cost_ms(est_rows * op.selectivity_hint.max(0.0).min(1.0));
    let runtime = 1.0 / (1.0 + cost_ms / 1000.0);
    let index = if op.needs_index && index_available {
        1.0
    } else {
        0.0
    };
    let batching = (op.max_batch as f64 / 64.0).min(1.0);
    let cache = if op.cacheable { 1.0 } else { 0.0 };
    let telemetry_score = match telemetry.average_wall_ms(&op.id) {
        Some(avg) => 1.0 / (1.0 + avg / 1000.0),
        None => 0.5,
    };
    let breakdown = vec![
        ("accuracy".to_string(), accuracy, W_ACCURACY * accuracy),
        ("runtime".to_string(), runtime, W_RUNTIME * runtime),
        ("index-availability".to_string(), index, W_INDEX * index),
        ("batching".to_string(), batching, W_BATCHING * batching),
        ("cache-reuse".to_string(), cache, W_CACHE * cache),
        (
            "telemetry".to_string(),
            telemetry_score,
            W_TELEMETRY * telemetry_score,
        ),
    ];
    let total = breakdown.iter().map(|(_, _, w)| w).sum();
    (total, breakdown)
}

/// Binds every step of the spec to its best-scoring operator, retaining
/// the second-best type-compatible candidate as a fallback. Deterministic
/// ties resolve by operator id.
pub fn bind(
    spec: &TaskSpec,
    registry: &Registry,
    catalog: &Catalog,
    telemetry: &TelemetryStore,
    index_available: bool,
) -> Result<Vec<BoundStep>, TaskError> {
    let base_rows = catalog
        .dataset(&spec.dataset)
        .map(|h| h.read().unwrap().row_count() as f64)
        .unwrap_or(0.0);
    let mut bound = Vec::new();
    for step in &spec.steps {
        let candidates = registry.candidates(step, index_available);
        if candidates.is_empty() {
            return Err(TaskError::UnbindableStep(step.name.clone()));
        }
        let mut scored: Vec<(f64, &OperatorSpec, Vec<(String, f64, f64)>)> = candidates
            .into_iter()
            .map(|op| {
                let (score, breakdown) =
                    score_candidate(op, base_rows, index_available, telemetry);
                (score, op, breakdown)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        let (score, best, breakdown) = scored.remove(0);
        let fallback = scored.first().map(|(_, op, _)| op.id.clone());
        bound.push(BoundStep {
            step: step.name.clone(),
            primary: best.id.clone(),
            fallback,
            score,
            breakdown,
            est_rows: base_rows * best.selectivity_hint.clamp(0.0, 1.0),
        });
    }
    Ok(bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{DatasetDescriptor, FieldDef, FieldKind, Record, Value};
    use crate::task::operator::standard_registry;
    use crate::task::{Objective, StepSpec};
    use crate::task::operator::{DataType, OperatorFamily};

    fn spec_with_steps(steps: Vec<StepSpec>) -> TaskSpec {
        TaskSpec {
            objective: Objective::Classify,
            dataset: "d".into(),
            target: Some("y".into()),
            constraints: vec![],
            expected_outputs: vec![],
            steps,
            budgets: Default::default(),
            preferences: BTreeMap::new(),
        }
    }

    fn catalog_with_rows(n: usize) -> Catalog {
        let catalog = Catalog::new();
        let h = catalog
            .register_dataset(DatasetDescriptor::new(
                "d",
                vec![FieldDef {
                    name: "y".into(),
                    kind: FieldKind::Numeric,
                }],
            ))
            .unwrap();
        let records: Vec<Record> = (0..n)
            .map(|i| Record::new(format!("r{i}")).with("y", Value::Number(i as f64)))
            .collect();
        h.write().unwrap().ingest(records);
        catalog
    }

    #[test]
    fn index_variant_wins_when_index_is_available() {
        let registry = standard_registry();
        let catalog = catalog_with_rows(10_000);
        let telemetry = TelemetryStore::in_memory();
        let step = StepSpec {
            name: "filter".into(),
            family: OperatorFamily::Data,
            capability: "filter".into(),
            inputs: vec![DataType::Records],
            output: DataType::Records,
            depends_on: vec![],
            params: BTreeMap::new(),
        };
        let spec = spec_with_steps(vec![step.clone()]);
        let bound = bind(&spec, &registry, &catalog, &telemetry, true).unwrap();
        assert_eq!(bound[0].primary, "filter-index");
        assert_eq!(bound[0].fallback.as_deref(), Some("filter-scan"));

        // Oracle: hand-compute both scores from the declared profiles.
        let rows = 10_000.0;
        let hand = |fixed: f64, per_row: f64, has_index: f64| -> f64 {
            let cost = fixed + per_row * rows * 0.5; // selectivity hint 0.5
            0.4 * 0.9 + 0.3 * (1.0 / (1.0 + cost / 1000.0)) + 0.1 * has_index
                + 0.1 * 1.0
                + 0.05 * 1.0
                + 0.05 * 0.5
        };
        let scan_score = hand(0.5, 0.001, 0.0);
        let index_score = hand(0.8, 0.0002, 1.0);
        assert!(index_score > scan_score);
        let bound_index = bound[0].score;
        assert!((bound_index - index_score).abs() < 1e-9, "{bound_index} vs {index_score}");

        // Without an index the scan variant is the only candidate.
        let bound = bind(&spec, &registry, &catalog, &telemetry, false).unwrap();
        assert_eq!(bound[0].primary, "filter-scan");
        assert!(bound[0].fallback.is_none());
    }

    #[test]
    fn missing_family_is_unbindable() {
        let registry = standard_registry();
        let catalog = catalog_with_rows(10);
        let telemetry = TelemetryStore::in_memory();
        let step = StepSpec {
            name: "mystery".into(),
            family: OperatorFamily::Model,
            capability: "mystery".into(),
            inputs: vec![DataType::Text],
            output: DataType::Text,
            depends_on: vec![],
            params: BTreeMap::new(),
        };
        let spec = spec_with_steps(vec![step]);
        match bind(&spec, &registry, &catalog, &telemetry, true).unwrap_err() {
            TaskError::UnbindableStep(name) => assert_eq!(name, "mystery"),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn binding_is_deterministic() {
        let registry = standard_registry();
        let catalog = catalog_with_rows(500);
        let telemetry = TelemetryStore::in_memory();
        let steps = crate::task::operator::steps_for(Objective::Answer, true);
        let spec = spec_with_steps(steps);
        let a = bind(&spec, &registry, &catalog, &telemetry, true).unwrap();
        let b = bind(&spec, &registry, &catalog, &telemetry, true).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn telemetry_ages_and_influences_scores() {
        let telemetry = TelemetryStore::in_memory();
        assert_eq!(telemetry.average_wall_ms("x"), None);
        for _ in 0..10 {
            telemetry.record("x", 100.0, 1);
        }
        let avg = telemetry.average_wall_ms("x").unwrap();
        assert!((avg - 100.0).abs() < 1e-9);
        // A run of faster observations pulls the EWMA down.
        for _ in 0..200 {
            telemetry.record("x", 10.0, 1);
        }
        let avg = telemetry.average_wall_ms("x").unwrap();
        assert!(avg < 20.0, "ewma {avg} should approach 10");
    }

    #[test]
    fn telemetry_persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let t = TelemetryStore::at(dir.path()).unwrap();
            t.record("scan", 42.0, 100);
        }
        let t = TelemetryStore::at(dir.path()).unwrap();
        assert!((t.average_wall_ms("scan").unwrap() - 42.0).abs() < 1e-9);
        // Raw runs appended as JSONL.
        let raw = std::fs::read_to_string(dir.path().join("scan.jsonl")).unwrap();
        assert_eq!(raw.lines().count(), 1);
    }
}
