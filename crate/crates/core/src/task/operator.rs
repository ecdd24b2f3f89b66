//! Operator definitions and the executable registry.
//!
//! Operators are typed, deterministic units with declared optimization
//! metadata (selectivity, latency and memory profiles, cacheability,
//! batch sizes). Three families: Data operators interface with the
//! catalog and fusion index, Model operators with the store and trainer,
//! LLM operators with the gateway.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::exec::ExecEnv;
use super::{Objective, StepSpec, TaskError};
use crate::catalog::{LabelMode, Record, Value};
use crate::gateway::{FieldSpec, JsonKind, PromptSegment, PromptTemplate};
use crate::search::{self, Candidate, ConstraintProfile, RankWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorFamily {
    Data,
    Model,
    Llm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Records,
    Candidates,
    Matrix,
    Scores,
    ModelRef,
    Text,
    Json,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilitySignature {
    pub inputs: Vec<DataType>,
    pub output: DataType,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub fixed_ms: f64,
    pub per_row_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub id: String,
    pub family: OperatorFamily,
    /// The step capability this operator implements (filter, retrieve...).
    pub capability: String,
    pub signature: CapabilitySignature,
    pub selectivity_hint: f64,
    pub latency: LatencyProfile,
    pub memory_per_row: f64,
    pub cacheable: bool,
    pub deterministic: bool,
    pub max_batch: usize,
    pub version: String,
    pub needs_index: bool,
    pub expected_accuracy: f64,
    /// Chain-merge eligibility (filter/project style row transforms).
    pub fusable: bool,
}

impl OperatorSpec {
    pub fn estimated_cost_ms(&self, rows: f64) -> f64 {
        self.latency.fixed_ms + self.latency.per_row_ms * rows
    }
}

/// Values flowing along plan edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataBatch {
    Records(Vec<Record>),
    Candidates(Vec<Candidate>),
    Matrix { rows: usize, cols: usize, data: Vec<f64> },
    Scores(Vec<f64>),
    ModelRef(String),
    Text(Vec<String>),
    Json(Json),
}

impl DataBatch {
    pub fn data_type(&self) -> DataType {
        match self {
            DataBatch::Records(_) => DataType::Records,
            DataBatch::Candidates(_) => DataType::Candidates,
            DataBatch::Matrix { .. } => DataType::Matrix,
            DataBatch::Scores(_) => DataType::Scores,
            DataBatch::ModelRef(_) => DataType::ModelRef,
            DataBatch::Text(_) => DataType::Text,
            DataBatch::Json(_) => DataType::Json,
        }
    }

    pub fn row_count(&self) -> usize {
        match self {
            DataBatch::Records(r) => r.len(),
            DataBatch::Candidates(c) => c.len(),
            DataBatch::Matrix { rows, .. } => *rows,
            DataBatch::Scores(s) => s.len(),
            DataBatch::Text(t) => t.len(),
            DataBatch::ModelRef(_) => 1,
            DataBatch::Json(_) => 1,
        }
    }

    /// Content digest for plan-cache keys.
    pub fn digest(&self) -> u64 {
        let body = serde_json::to_vec(self).unwrap_or_default();
        crate::util::fnv1a64(&body)
    }
}

pub type OpFn = Arc<
    dyn Fn(&ExecEnv, &[DataBatch], &BTreeMap<String, String>) -> Result<DataBatch, TaskError>
        + Send
        + Sync,
>;

/// Operator registry: specs plus executable implementations.
#[derive(Clone, Default)]
pub struct Registry {
    specs: BTreeMap<String, OperatorSpec>,
    impls: BTreeMap<String, OpFn>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn register(&mut self, spec: OperatorSpec, implementation: OpFn) {
        self.impls.insert(spec.id.clone(), implementation);
        self.specs.insert(spec.id.clone(), spec);
    }

    pub fn spec(&self, id: &str) -> Option<&OperatorSpec> {
        self.specs.get(id)
    }

    pub fn implementation(&self, id: &str) -> Option<OpFn> {
        self.impls.get(id).cloned()
    }

    pub fn specs(&self) -> impl Iterator<Item = &OperatorSpec> {
        self.specs.values()
    }

    /// Type-compatible candidates for a step, sorted by id.
    pub fn candidates(&self, step: &StepSpec, index_available: bool) -> Vec<&OperatorSpec> {
        self.specs
            .values()
            .filter(|op| op.family == step.family)
            .filter(|op| op.capability == step.capability)
            .filter(|op| op.signature.inputs == step.inputs && op.signature.output == step.output)
            .filter(|op| !op.needs_index || index_available)
            .collect()
    }
}

/// Step templates per objective ("operation schema").
pub fn steps_for(objective: Objective, has_constraints: bool) -> Vec<StepSpec> {
    let mut steps = Vec::new();
    match objective {
        Objective::Classify | Objective::Regress => {
            steps.push(StepSpec {
                name: "load".into(),
                family: OperatorFamily::Data,
                capability: "load".into(),
                inputs: vec![],
                output: DataType::Records,
                depends_on: vec![],
                params: BTreeMap::new(),
            });
            let mut prev = "load".to_string();
            if has_constraints {
                steps.push(StepSpec {
                    name: "filter".into(),
                    family: OperatorFamily::Data,
                    capability: "filter".into(),
                    inputs: vec![DataType::Records],
                    output: DataType::Records,
                    depends_on: vec![prev.clone()],
                    params: BTreeMap::new(),
                });
                prev = "filter".into();
            }
            steps.push(StepSpec {
                name: "featurize".into(),
                family: OperatorFamily::Data,
                capability: "featurize".into(),
                inputs: vec![DataType::Records],
                output: DataType::Matrix,
                depends_on: vec![prev],
                params: BTreeMap::new(),
            });
            steps.push(StepSpec {
                name: "score".into(),
                family: OperatorFamily::Model,
                capability: "score".into(),
                inputs: vec![DataType::Matrix],
                output: DataType::Scores,
                depends_on: vec!["featurize".into()],
                params: BTreeMap::new(),
            });
            steps.push(StepSpec {
                name: "emit".into(),
                family: OperatorFamily::Data,
                capability: "emit".into(),
                inputs: vec![DataType::Scores],
                output: DataType::Json,
                depends_on: vec!["score".into()],
                params: BTreeMap::new(),
            });
        }
        Objective::Search => {
            steps.push(StepSpec {
                name: "retrieve".into(),
                family: OperatorFamily::Data,
                capability: "retrieve".into(),
                inputs: vec![],
                output: DataType::Candidates,
                depends_on: vec![],
                params: BTreeMap::new(),
            });
            steps.push(StepSpec {
                name: "evidence".into(),
                family: OperatorFamily::Data,
                capability: "evidence".into(),
                inputs: vec![DataType::Candidates],
                output: DataType::Json,
                depends_on: vec!["retrieve".into()],
                params: BTreeMap::new(),
            });
        }
        Objective::Answer => {
            steps.push(StepSpec {
                name: "retrieve".into(),
                family: OperatorFamily::Data,
                capability: "retrieve".into(),
                inputs: vec![],
                output: DataType::Candidates,
                depends_on: vec![],
                params: BTreeMap::new(),
            });
            steps.push(StepSpec {
                name: "evidence".into(),
                family: OperatorFamily::Data,
                capability: "evidence".into(),
                inputs: vec![DataType::Candidates],
                output: DataType::Json,
                depends_on: vec!["retrieve".into()],
                params: BTreeMap::new(),
            });
            steps.push(StepSpec {
                name: "answer".into(),
                family: OperatorFamily::Llm,
                capability: "answer".into(),
                inputs: vec![DataType::Json],
                output: DataType::Json,
                depends_on: vec!["evidence".into()],
                params: BTreeMap::new(),
            });
        }
    }
    steps
}

fn op(
    id: &str,
    family: OperatorFamily,
    capability: &str,
    inputs: Vec<DataType>,
    output: DataType,
) -> OperatorSpec {
    OperatorSpec {
        id: id.to_string(),
        family,
        capability: capability.to_string(),
        signature: CapabilitySignature { inputs, output },
        selectivity_hint: 1.0,
        latency: LatencyProfile {
            fixed_ms: 1.0,
            per_row_ms: 0.001,
        },
        memory_per_row: 64.0,
        cacheable: true,
        deterministic: true,
        max_batch: 1024,
        version: "1".into(),
        needs_index: false,
        expected_accuracy: 0.9,
        fusable: false,
    }
}

fn constraints_from_params(params: &BTreeMap<String, String>) -> (Option<String>, ConstraintProfile) {
    let field = params.get("constraint_field").cloned();
    let profile = params
        .get("profile")
        .and_then(|p| serde_json::from_str(p).ok())
        .unwrap_or_default();
    (field, profile)
}

fn record_satisfies(record: &Record, field: &str, profile: &ConstraintProfile) -> bool {
    if let Some((lo, hi)) = profile.range {
        match record.values.get(field).and_then(Value::as_number) {
            Some(v) if v >= lo && v <= hi => {}
            _ => return false,
        }
    }
    if !profile.labels.is_empty() {
        let have = record
            .values
            .get(field)
            .and_then(Value::as_labels)
            .unwrap_or(&[]);
        let ok = match profile.label_mode {
            LabelMode::Any => profile.labels.iter().any(|l| have.contains(l)),
            LabelMode::All => profile.labels.iter().all(|l| have.contains(l)),
        };
        if !ok {
            return false;
        }
    }
    true
}

fn expect_records<'a>(inputs: &'a [DataBatch], op: &str) -> Result<&'a [Record], TaskError> {
    match inputs.first() {
        Some(DataBatch::Records(r)) => Ok(r),
        other => Err(TaskError::Internal(format!(
            "{op} expected Records, got {other:?}"
        ))),
    }
}

/// Builds the standard registry of executable operators.
pub fn standard_registry() -> Registry {
    let mut registry = Registry::new();

    // Data: full scan of a dataset's live records.
    let mut scan = op("scan", OperatorFamily::Data, "load", vec![], DataType::Records);
    scan.latency = LatencyProfile {
        fixed_ms: 1.0,
        per_row_ms: 0.001,
    };
    registry.register(
        scan,
        Arc::new(|env: &ExecEnv, _inputs, params| {
            let dataset_id = params
                .get("dataset")
                .ok_or_else(|| TaskError::Internal("scan needs a dataset param".into()))?;
            let handle = env.catalog.dataset(dataset_id)?;
            let ds = handle.read().unwrap();
            Ok(DataBatch::Records(ds.live_records().cloned().collect()))
        }),
    );

    // Data: predicate filter over records, plain scan variant.
    let mut filter_scan = op(
        "filter-scan",
        OperatorFamily::Data,
        "filter",
        vec![DataType::Records],
        DataType::Records,
    );
    filter_scan.selectivity_hint = 0.5;
    filter_scan.latency = LatencyProfile {
        fixed_ms: 0.5,
        per_row_ms: 0.001,
    };
    filter_scan.fusable = true;
    let filter_impl: OpFn = Arc::new(|_env: &ExecEnv, inputs, params| {
        let records = expect_records(inputs, "filter")?;
        let (field, profile) = constraints_from_params(params);
        let Some(field) = field else {
            return Ok(DataBatch::Records(records.to_vec()));
        };
        if profile.unsatisfiable {
            return Ok(DataBatch::Records(Vec::new()));
        }
        Ok(DataBatch::Records(
            records
                .iter()
                .filter(|r| record_satisfies(r, &field, &profile))
                .cloned()
                .collect(),
        ))
    });
    registry.register(filter_scan, filter_impl.clone());

    // Data: the same predicate served through the attribute directory of
    // the fusion index; cheaper per row, requires an index.
    let mut filter_index = op(
        "filter-index",
        OperatorFamily::Data,
        "filter",
        vec![DataType::Records],
        DataType::Records,
    );
    filter_index.selectivity_hint = 0.5;
    filter_index.latency = LatencyProfile {
        fixed_ms: 0.8,
        per_row_ms: 0.0002,
    };
    filter_index.needs_index = true;
    filter_index.fusable = true;
    registry.register(filter_index, filter_impl);

    // Data: column projection.
    let mut project = op(
        "project",
        OperatorFamily::Data,
        "project",
        vec![DataType::Records],
        DataType::Records,
    );
    project.latency = LatencyProfile {
        fixed_ms: 0.2,
        per_row_ms: 0.0005,
    };
    project.fusable = true;
    registry.register(
        project,
        Arc::new(|_env: &ExecEnv, inputs, params| {
            let records = expect_records(inputs, "project")?;
            let fields: Vec<&str> = params
                .get("fields")
                .map(|f| f.split(',').map(str::trim).collect())
                .unwrap_or_default();
            if fields.is_empty() {
                return Ok(DataBatch::Records(records.to_vec()));
            }
            Ok(DataBatch::Records(
                records
                    .iter()
                    .map(|r| {
                        let mut out = Record::new(r.record_id.clone())
                            .tenant(r.tenant.clone())
                            .at(r.timestamp);
                        for f in &fields {
                            if let Some(v) = r.values.get(*f) {
                                out.values.insert(f.to_string(), v.clone());
                            }
                        }
                        out
                    })
                    .collect(),
            ))
        }),
    );

    // Data: numeric featurization of records into a matrix.
    let featurize = op(
        "featurize",
        OperatorFamily::Data,
        "featurize",
        vec![DataType::Records],
        DataType::Matrix,
    );
    registry.register(
        featurize,
        Arc::new(|_env: &ExecEnv, inputs, params| {
            let records = expect_records(inputs, "featurize")?;
            let fields: Vec<String> = params
                .get("fields")
                .map(|f| f.split(',').map(|s| s.trim().to_string()).collect())
                .unwrap_or_default();
            let cols = fields.len();
            let mut data = Vec::with_capacity(records.len() * cols);
            for r in records {
                for f in &fields {
                    data.push(
                        r.values
                            .get(f)
                            .and_then(Value::as_number)
                            .unwrap_or(f64::NAN),
                    );
                }
            }
            Ok(DataBatch::Matrix {
                rows: records.len(),
                cols,
                data,
            })
        }),
    );

    // Data: constraint-guided index retrieval.
    let mut index_search = op(
        "index-search",
        OperatorFamily::Data,
        "retrieve",
        vec![],
        DataType::Candidates,
    );
    index_search.needs_index = true;
    index_search.latency = LatencyProfile {
        fixed_ms: 2.0,
        per_row_ms: 0.0001,
    };
    registry.register(
        index_search,
        Arc::new(|env: &ExecEnv, _inputs, params| {
            let dataset_id = params
                .get("dataset")
                .ok_or_else(|| TaskError::Internal("index-search needs a dataset".into()))?;
            let query: Vec<f32> = params
                .get("query")
                .and_then(|q| serde_json::from_str(q).ok())
                .ok_or_else(|| TaskError::Internal("index-search needs a query vector".into()))?;
            let k: usize = params.get("k").and_then(|k| k.parse().ok()).unwrap_or(10);
            let ef: usize = params.get("ef").and_then(|e| e.parse().ok()).unwrap_or(128);
            let (_, profile) = constraints_from_params(params);
            let weights: RankWeights = params
                .get("weights")
                .and_then(|w| serde_json::from_str(w).ok())
                .unwrap_or_default();
            let indexes = env.indexes.read().unwrap();
            let parts = indexes
                .get(dataset_id)
                .ok_or_else(|| TaskError::Internal(format!("no index for `{dataset_id}`")))?;
            let outcome = search::search_partitioned(parts, &query, k, &profile, &weights, ef)?;
            Ok(DataBatch::Candidates(outcome.candidates))
        }),
    );

    // Data: exact scan-and-rank retrieval (the brute-force route). Also
    // the natural fallback for index retrieval.
    let mut scan_rank = op(
        "scan-rank",
        OperatorFamily::Data,
        "retrieve",
        vec![],
        DataType::Candidates,
    );
    scan_rank.latency = LatencyProfile {
        fixed_ms: 1.0,
        per_row_ms: 0.01,
    };
    scan_rank.expected_accuracy = 1.0;
    registry.register(
        scan_rank,
        Arc::new(|env: &ExecEnv, _inputs, params| {
            let dataset_id = params
                .get("dataset")
                .ok_or_else(|| TaskError::Internal("scan-rank needs a dataset".into()))?;
            let query: Vec<f32> = params
                .get("query")
                .and_then(|q| serde_json::from_str(q).ok())
                .ok_or_else(|| TaskError::Internal("scan-rank needs a query vector".into()))?;
            let k: usize = params.get("k").and_then(|k| k.parse().ok()).unwrap_or(10);
            let (_, profile) = constraints_from_params(params);
            let weights: RankWeights = params
                .get("weights")
                .and_then(|w| serde_json::from_str(w).ok())
                .unwrap_or_default();
            let indexes = env.indexes.read().unwrap();
            let parts = indexes
                .get(dataset_id)
                .ok_or_else(|| TaskError::Internal(format!("no index for `{dataset_id}`")))?;
            let mut all = Vec::new();
            for (_, index) in parts.partitions() {
                all.extend(search::brute_force(index, &query, k, &profile, &weights)?);
            }
            all.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then_with(|| a.node_id.cmp(&b.node_id))
            });
            all.truncate(k);
            Ok(DataBatch::Candidates(all))
        }),
    );

    // Data: evidence projection over candidates.
    let evidence = op(
        "evidence-project",
        OperatorFamily::Data,
        "evidence",
        vec![DataType::Candidates],
        DataType::Json,
    );
    registry.register(
        evidence,
        Arc::new(|env: &ExecEnv, inputs, params| {
            let candidates = match inputs.first() {
                Some(DataBatch::Candidates(c)) => c,
                other => {
                    return Err(TaskError::Internal(format!(
                        "evidence expected Candidates, got {other:?}"
                    )))
                }
            };
            let dataset_id = params
                .get("dataset")
                .ok_or_else(|| TaskError::Internal("evidence needs a dataset".into()))?;
            let fields: Vec<String> = params
                .get("fields")
                .map(|f| f.split(',').map(|s| s.trim().to_string()).collect())
                .unwrap_or_default();
            let handle = env.catalog.dataset(dataset_id)?;
            let ds = handle.read().unwrap();
            let slices: Vec<Json> = candidates
                .iter()
                .map(|c| {
                    let slice = search::evidence(c, &ds, &fields);
                    serde_json::json!({
                        "id": c.node_id,
                        "score": c.score,
                        "values": slice.values,
                        "warning": slice.warning,
                    })
                })
                .collect();
            Ok(DataBatch::Json(Json::Array(slices)))
        }),
    );

    // Data: wrap scores as a JSON result payload.
    let emit = op(
        "emit-scores",
        OperatorFamily::Data,
        "emit",
        vec![DataType::Scores],
        DataType::Json,
    );
    registry.register(
        emit,
        Arc::new(|_env: &ExecEnv, inputs, _params| {
            let scores = match inputs.first() {
                Some(DataBatch::Scores(s)) => s,
                other => {
                    return Err(TaskError::Internal(format!(
                        "emit expected Scores, got {other:?}"
                    )))
                }
            };
            Ok(DataBatch::Json(serde_json::json!({
                "predictions": scores,
                "count": scores.len(),
            })))
        }),
    );

    // Model: score a matrix with the branch-head model from the store.
    let mut model_score = op(
        "model-score",
        OperatorFamily::Model,
        "score",
        vec![DataType::Matrix],
        DataType::Scores,
    );
    model_score.latency = LatencyProfile {
        fixed_ms: 2.0,
        per_row_ms: 0.002,
    };
    registry.register(
        model_score,
        Arc::new(|env: &ExecEnv, inputs, params| {
            let (rows, cols, data) = match inputs.first() {
                Some(DataBatch::Matrix { rows, cols, data }) => (*rows, *cols, data),
                other => {
                    return Err(TaskError::Internal(format!(
                        "model-score expected Matrix, got {other:?}"
                    )))
                }
            };
            let store = env
                .store
                .as_ref()
                .ok_or_else(|| TaskError::Internal("no model store attached".into()))?;
            let version = match params.get("model_version") {
                Some(v) => v.clone(),
                None => store.branch_head(params.get("branch").map(String::as_str).unwrap_or("main"))?,
            };
            let snapshot = store.load_snapshot(&version)?;
            let model = crate::train::load_model(store, &snapshot)?;
            let mut scores = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &data[r * cols..(r + 1) * cols];
                scores.push(model.predict(row));
            }
            Ok(DataBatch::Scores(scores))
        }),
    );

    // LLM: answer over evidence through the gateway.
    let mut llm_answer = op(
        "llm-answer",
        OperatorFamily::Llm,
        "answer",
        vec![DataType::Json],
        DataType::Json,
    );
    llm_answer.latency = LatencyProfile {
        fixed_ms: 20.0,
        per_row_ms: 0.0,
    };
    llm_answer.max_batch = 16;
    registry.register(
        llm_answer,
        Arc::new(|env: &ExecEnv, inputs, params| {
            let evidence = match inputs.first() {
                Some(DataBatch::Json(j)) => j,
                other => {
                    return Err(TaskError::Internal(format!(
                        "llm-answer expected Json, got {other:?}"
                    )))
                }
            };
            let question = params.get("question").cloned().unwrap_or_default();
            let template = PromptTemplate::new(
                "answer",
                vec![
                    PromptSegment::Literal("ANSWER using evidence.\nQUESTION: ".into()),
                    PromptSegment::Slot("question".into()),
                    PromptSegment::Literal("\nEVIDENCE: ".into()),
                    PromptSegment::Slot("evidence".into()),
                ],
                vec![FieldSpec {
                    name: "answer".into(),
                    kind: JsonKind::String,
                }],
            )
            .expect("static template");
            let mut slots = BTreeMap::new();
            slots.insert("question".to_string(), question);
            slots.insert("evidence".to_string(), evidence.to_string());
            Ok(DataBatch::Json(env.gateway.complete(&template, &slots)?))
        }),
    );

    registry
}
