//! Declarative task engine: request parsing, operator binding, DAG
//! synthesis and optimization, topological parallel execution, and LLM
//! call batching.

mod batch;
mod bind;
pub mod exec;
mod operator;
mod optimize;
mod plan;

pub use batch::{batch_optimize, rebalance, run_batched, BatchGroup, BatchPlan, DemoCandidate, LlmCall};
pub use bind::{bind, BoundStep, TelemetryStore};
pub use exec::{execute, ExecEnv, ExecReport, ExecStatus, NodeTelemetry, RuntimeConfig};
pub use operator::{
    standard_registry, CapabilitySignature, DataBatch, DataType, LatencyProfile, OperatorFamily,
    OperatorSpec, Registry,
};
pub use optimize::{optimize_dag, RewriteEntry, DEFAULT_CONTEXT_BUDGET};
pub use plan::{synthesize, Annotations, ExecUnit, PlanDag, PlanEdge, PlanNode};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, FieldKind, LabelMode};
use crate::gateway::{
    FieldSpec, Gateway, GatewayError, JsonKind, PromptSegment, PromptTemplate,
};
use crate::index::IndexError;
use crate::search::{Filter, SearchError};
use crate::store::StoreError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown objective `{0}`; expected classify, regress, search or answer")]
    UnknownObjective(String),
    #[error("request incomplete; missing: {}", .0.join(", "))]
    Incomplete(Vec<String>),
    #[error("conflicting constraints on `{field}`: `{a}` contradicts `{b}`")]
    ConflictingConstraints { field: String, a: String, b: String },
    #[error("cannot normalize value `{0}`")]
    BadValue(String),
    #[error("natural-language extraction failed schema validation: {0}")]
    NlExtraction(String),
    #[error("no registered operator can implement step `{0}`")]
    UnbindableStep(String),
    #[error("plan contains a cycle involving `{0}`")]
    PlanningCycle(String),
    #[error("plan node `{step}` failed after retry and fallback: {reason}")]
    NodeFailed { step: String, reason: String },
    #[error("call `{0}` exceeds the context limit on its own")]
    UnbatchableCall(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("{0}")]
    Internal(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Classify,
    Regress,
    Search,
    Answer,
}

impl Objective {
    pub fn parse(s: &str) -> Option<Objective> {
        match s.to_ascii_lowercase().as_str() {
            "classify" => Some(Objective::Classify),
            "regress" => Some(Objective::Regress),
            "search" => Some(Objective::Search),
            "answer" => Some(Objective::Answer),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Classify => "classify",
            Objective::Regress => "regress",
            Objective::Search => "search",
            Objective::Answer => "answer",
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Budgets {
    #[serde(default)]
    pub latency_ms: Option<f64>,
    #[serde(default)]
    pub cost_tokens: Option<u64>,
    #[serde(default)]
    pub quality_floor: Option<f64>,
}

impl Budgets {
    fn validate(&self) -> Result<(), TaskError> {
        if let Some(l) = self.latency_ms {
            if l < 0.0 {
                return Err(TaskError::BadValue("latency budget must be non-negative".into()));
            }
        }
        if let Some(q) = self.quality_floor {
            if q < 0.0 {
                return Err(TaskError::BadValue("quality floor must be non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RequestFilter {
    pub field: String,
    /// gte | lte | between | has-labels
    pub op: String,
    pub value: Json,
    #[serde(default)]
    pub mode: Option<String>,
}

/// The request file format: typed key-value fields plus an optional
/// free-form fragment routed through the LLM gateway.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DeclarativeRequest {
    #[serde(default)]
    pub objective: String,
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub filters: Vec<RequestFilter>,
    #[serde(default)]
    pub preferences: BTreeMap<String, String>,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub freeform: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CanonicalConstraint {
    pub field: String,
    pub filter: Filter,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepSpec {
    pub name: String,
    pub family: OperatorFamily,
    /// Required operator capability for this step.
    pub capability: String,
    pub inputs: Vec<DataType>,
    pub output: DataType,
    pub depends_on: Vec<String>,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

/// The canonical execution contract produced by parsing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub objective: Objective,
    pub dataset: String,
    pub target: Option<String>,
    pub constraints: Vec<CanonicalConstraint>,
    pub expected_outputs: Vec<String>,
    pub steps: Vec<StepSpec>,
    pub budgets: Budgets,
    pub preferences: BTreeMap<String, String>,
}

/// Scale-suffix normalization: `2s` -> 2000 (ms), `10k` -> 10000,
/// `1M` -> 1000000, bare numbers pass through.
pub fn normalize_scalar(value: &Json) -> Result<f64, TaskError> {
    match value {
        Json::Number(n) => n
            .as_f64()
            .ok_or_else(|| TaskError::BadValue(n.to_string())),
        Json::String(s) => {
            let t = s.trim();
            let (body, factor) = if let Some(b) = t.strip_suffix("ms") {
                (b, 1.0)
            } else if let Some(b) = t.strip_suffix('s') {
                (b, 1000.0)
            } else if let Some(b) = t.strip_suffix('k') {
                (b, 1e3)
            } else if let Some(b) = t.strip_suffix('M') {
                (b, 1e6)
            } else {
                (t, 1.0)
            };
            body.trim()
                .parse::<f64>()
                .map(|v| v * factor)
                .map_err(|_| TaskError::BadValue(s.clone()))
        }
        other => Err(TaskError::BadValue(other.to_string())),
    }
}

fn decompose_template() -> PromptTemplate {
    PromptTemplate::new(
        "decompose",
        vec![
            PromptSegment::Literal("DECOMPOSE: ".into()),
            PromptSegment::Slot("text".into()),
        ],
        vec![
            FieldSpec {
                name: "objective".into(),
                kind: JsonKind::String,
            },
            FieldSpec {
                name: "filters".into(),
                kind: JsonKind::Array,
            },
        ],
    )
    .expect("static template is valid")
}

/// Parses and grounds a declarative request into a [`TaskSpec`].
///
/// Free-form fragments go through the gateway's decomposition template and
/// the structured output is validated against the same schema before
/// merging (explicit fields win). Incomplete requests produce an
/// actionable report naming the missing fields; contradictory numeric
/// filters name the conflicting pair.
pub fn parse(
    request: &DeclarativeRequest,
    catalog: &Catalog,
    gateway: &Gateway,
) -> Result<TaskSpec, TaskError> {
    request.budgets.validate()?;
    let mut objective_raw = request.objective.clone();
    let mut target = request.target.clone();
    let mut filters = request.filters.clone();

    if let Some(text) = &request.freeform {
        let mut slots = BTreeMap::new();
        slots.insert("text".to_string(), text.clone());
        let extracted = gateway
            .complete(&decompose_template(), &slots)
            .map_err(|e| match e {
                GatewayError::SchemaInvalid(d) => TaskError::NlExtraction(d),
                other => TaskError::Gateway(other),
            })?;
        if objective_raw.is_empty() {
            if let Some(o) = extracted.get("objective").and_then(Json::as_str) {
                objective_raw = o.to_string();
            }
        }
        if target.is_none() {
            if let Some(t) = extracted.get("target").and_then(Json::as_str) {
                if !t.is_empty() {
                    target = Some(t.to_string());
                }
            }
        }
        if let Some(extra) = extracted.get("filters").and_then(Json::as_array) {
            for f in extra {
                if let Ok(rf) = serde_json::from_value::<RequestFilter>(f.clone()) {
                    filters.push(rf);
                }
            }
        }
    }

    // Actionable incompleteness report.
    let mut missing = Vec::new();
    if objective_raw.is_empty() {
        missing.push("objective".to_string());
    }
    if request.dataset.is_none() {
        missing.push("dataset".to_string());
    }
    let objective = if objective_raw.is_empty() {
        None
    } else {
        Some(
            Objective::parse(&objective_raw)
                .ok_or_else(|| TaskError::UnknownObjective(objective_raw.clone()))?,
        )
    };
    if matches!(objective, Some(Objective::Classify | Objective::Regress | Objective::Answer))
        && target.is_none()
    {
        missing.push("target".to_string());
    }
    if !missing.is_empty() {
        return Err(TaskError::Incomplete(missing));
    }
    let objective = objective.expect("checked above");
    let dataset_id = request.dataset.clone().expect("checked above");

    let handle = catalog.dataset(&dataset_id)?;
    let dataset = handle.read().unwrap();
    let descriptor = dataset.descriptor();

    // Target grounding: classify/regress require a real field; answer
    // treats the target as question text.
    if matches!(objective, Objective::Classify | Objective::Regress) {
        let t = target.as_deref().expect("checked above");
        if descriptor.field(t).is_none() {
            return Err(TaskError::Catalog(CatalogError::UnknownField(t.to_string())));
        }
    }

    // Fold filters into canonical constraints with unit normalization.
    let mut intervals: BTreeMap<String, (f64, f64, String, String)> = BTreeMap::new();
    let mut label_constraints: Vec<CanonicalConstraint> = Vec::new();
    for f in &filters {
        let def = descriptor
            .field(&f.field)
            .ok_or_else(|| TaskError::Catalog(CatalogError::UnknownField(f.field.clone())))?;
        match f.op.as_str() {
            "gte" | "lte" | "between" => {
                if def.kind != FieldKind::Numeric {
                    return Err(TaskError::Catalog(CatalogError::KindMismatch {
                        field: f.field.clone(),
                        expected: "numeric".into(),
                        actual: def.kind.name().into(),
                    }));
                }
                let entry = intervals.entry(f.field.clone()).or_insert((
                    f64::NEG_INFINITY,
                    f64::INFINITY,
                    String::new(),
                    String::new(),
                ));
                match f.op.as_str() {
                    "gte" => {
                        let v = normalize_scalar(&f.value)?;
                        if v > entry.0 {
                            entry.0 = v;
                            entry.2 = format!("{} >= {v}", f.field);
                        }
                    }
                    "lte" => {
                        let v = normalize_scalar(&f.value)?;
                        if v < entry.1 {
                            entry.1 = v;
                            entry.3 = format!("{} <= {v}", f.field);
                        }
                    }
                    _ => {
                        let arr = f
                            .value
                            .as_array()
                            .ok_or_else(|| TaskError::BadValue(f.value.to_string()))?;
                        if arr.len() != 2 {
                            return Err(TaskError::BadValue(
                                "between expects [lo, hi]".into(),
                            ));
                        }
                        let lo = normalize_scalar(&arr[0])?;
                        let hi = normalize_scalar(&arr[1])?;
                        if lo > entry.0 {
                            entry.0 = lo;
                            entry.2 = format!("{} >= {lo}", f.field);
                        }
                        if hi < entry.1 {
                            entry.1 = hi;
                            entry.3 = format!("{} <= {hi}", f.field);
                        }
                    }
                }
            }
            "has-labels" | "has_labels" => {
                if def.kind != FieldKind::LabelSet {
                    return Err(TaskError::Catalog(CatalogError::KindMismatch {
                        field: f.field.clone(),
                        expected: "label-set".into(),
                        actual: def.kind.name().into(),
                    }));
                }
                let labels: Vec<String> = match &f.value {
                    Json::Array(items) => items
                        .iter()
                        .map(|v| v.as_str().map(str::to_string))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| TaskError::BadValue(f.value.to_string()))?,
                    Json::String(s) => s.split(',').map(|x| x.trim().to_string()).collect(),
                    other => return Err(TaskError::BadValue(other.to_string())),
                };
                let mode = match f.mode.as_deref() {
                    Some("all") => LabelMode::All,
                    _ => LabelMode::Any,
                };
                label_constraints.push(CanonicalConstraint {
                    field: f.field.clone(),
                    filter: Filter::HasLabels { labels, mode },
                });
            }
            other => return Err(TaskError::BadValue(format!("unknown filter op `{other}`"))),
        }
    }
    let mut constraints = Vec::new();
    for (field, (lo, hi, lo_desc, hi_desc)) in intervals {
        if lo > hi {
            return Err(TaskError::ConflictingConstraints {
                field,
                a: lo_desc,
                b: hi_desc,
            });
        }
        let filter = if lo.is_finite() && hi.is_finite() {
            Filter::AttrBetween { lo, hi }
        } else if lo.is_finite() {
            Filter::AttrAtLeast { value: lo }
        } else {
            Filter::AttrAtMost { value: hi }
        };
        constraints.push(CanonicalConstraint { field, filter });
    }
    constraints.extend(label_constraints);

    let expected_outputs: Vec<String> = match request.preferences.get("outputs") {
        Some(outs) => outs.split(',').map(|s| s.trim().to_string()).collect(),
        None => match objective {
            Objective::Classify | Objective::Regress => vec!["prediction".to_string()],
            Objective::Search => vec!["matches".to_string()],
            Objective::Answer => vec!["answer".to_string()],
        },
    };

    let steps = operator::steps_for(objective, !constraints.is_empty());
    Ok(TaskSpec {
        objective,
        dataset: dataset_id,
        target,
        constraints,
        expected_outputs,
        steps,
        budgets: request.budgets.clone(),
        preferences: request.preferences.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{DatasetDescriptor, FieldDef};
    use crate::gateway::{GatewayBudget, MockBackend};
    use std::sync::Arc;

    fn setup_catalog() -> Catalog {
        let catalog = Catalog::new();
        catalog
            .register_dataset(DatasetDescriptor::new(
                "users",
                vec![
                    FieldDef {
                        name: "churn".into(),
                        kind: FieldKind::Numeric,
                    },
                    FieldDef {
                        name: "age".into(),
                        kind: FieldKind::Numeric,
                    },
                    FieldDef {
                        name: "price".into(),
                        kind: FieldKind::Numeric,
                    },
                    FieldDef {
                        name: "latency".into(),
                        kind: FieldKind::Numeric,
                    },
                    FieldDef {
                        name: "tags".into(),
                        kind: FieldKind::LabelSet,
                    },
                ],
            ))
            .unwrap();
        catalog
    }

    fn mock_gateway() -> Gateway {
        Gateway::new(
            Arc::new(MockBackend::with_standard_rules(1)),
            GatewayBudget::unlimited(),
        )
    }

    fn filter(field: &str, op: &str, value: Json) -> RequestFilter {
        RequestFilter {
            field: field.into(),
            op: op.into(),
            value,
            mode: None,
        }
    }

    #[test]
    fn grounds_a_basic_classify_request() {
        let catalog = setup_catalog();
        let request = DeclarativeRequest {
            objective: "classify".into(),
            dataset: Some("users".into()),
            target: Some("churn".into()),
            filters: vec![filter("age", "gte", serde_json::json!(30))],
            ..Default::default()
        };
        let spec = parse(&request, &catalog, &mock_gateway()).unwrap();
        assert_eq!(spec.objective, Objective::Classify);
        assert_eq!(spec.constraints.len(), 1);
        assert_eq!(spec.constraints[0].field, "age");
        assert!(matches!(
            spec.constraints[0].filter,
            Filter::AttrAtLeast { value } if value == 30.0
        ));
        assert!(!spec.steps.is_empty());
    }

    #[test]
    fn normalizes_time_units() {
        let catalog = setup_catalog();
        let request = DeclarativeRequest {
            objective: "classify".into(),
            dataset: Some("users".into()),
            target: Some("churn".into()),
            filters: vec![filter("latency", "lte", serde_json::json!("2s"))],
            ..Default::default()
        };
        let spec = parse(&request, &catalog, &mock_gateway()).unwrap();
        assert!(matches!(
            spec.constraints[0].filter,
            Filter::AttrAtMost { value } if value == 2000.0
        ));
        // Count suffixes too.
        assert_eq!(normalize_scalar(&serde_json::json!("10k")).unwrap(), 10_000.0);
        assert_eq!(normalize_scalar(&serde_json::json!("1M")).unwrap(), 1_000_000.0);
        assert_eq!(normalize_scalar(&serde_json::json!("250ms")).unwrap(), 250.0);
    }

    #[test]
    fn conflicting_filters_name_the_pair() {
        let catalog = setup_catalog();
        let request = DeclarativeRequest {
            objective: "classify".into(),
            dataset: Some("users".into()),
            target: Some("churn".into()),
            filters: vec![
                filter("price", "lte", serde_json::json!(10)),
                filter("price", "gte", serde_json::json!(20)),
            ],
            ..Default::default()
        };
        let err = parse(&request, &catalog, &mock_gateway()).unwrap_err();
        match err {
            TaskError::ConflictingConstraints { field, a, b } => {
                assert_eq!(field, "price");
                assert!(a.contains("20") && b.contains("10"), "{a} / {b}");
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn incomplete_request_reports_missing_fields() {
        let catalog = setup_catalog();
        let request = DeclarativeRequest {
            objective: "classify".into(),
            ..Default::default()
        };
        match parse(&request, &catalog, &mock_gateway()).unwrap_err() {
            TaskError::Incomplete(missing) => {
                assert!(missing.contains(&"dataset".to_string()));
                assert!(missing.contains(&"target".to_string()));
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn unknown_target_field_is_an_error() {
        let catalog = setup_catalog();
        let request = DeclarativeRequest {
            objective: "classify".into(),
            dataset: Some("users".into()),
            target: Some("nope".into()),
            ..Default::default()
        };
        assert!(matches!(
            parse(&request, &catalog, &mock_gateway()),
            Err(TaskError::Catalog(CatalogError::UnknownField(_)))
        ));
    }

    #[test]
    fn freeform_routes_through_gateway_and_validates() {
        let catalog = setup_catalog();
        let request = DeclarativeRequest {
            dataset: Some("users".into()),
            target: Some("churn".into()),
            freeform: Some("figure out which users will churn".into()),
            ..Default::default()
        };
        // The mock's decomposition rule returns objective `answer`.
        let spec = parse(&request, &catalog, &mock_gateway()).unwrap();
        assert_eq!(spec.objective, Objective::Answer);
    }

    #[test]
    fn nl_extraction_failure_surfaces_after_retry() {
        use crate::gateway::{MockResponse, MockRule};
        let catalog = setup_catalog();
        let backend = MockBackend::new(
            1,
            vec![MockRule {
                prefix: "DECOMPOSE:".into(),
                response: MockResponse::Fixed("{\"not\":\"conforming\"}".into()),
                malformed_first: 0,
            }],
        );
        let gateway = Gateway::new(Arc::new(backend), GatewayBudget::unlimited());
        let request = DeclarativeRequest {
            dataset: Some("users".into()),
            freeform: Some("anything".into()),
            ..Default::default()
        };
        assert!(matches!(
            parse(&request, &catalog, &gateway),
            Err(TaskError::NlExtraction(_))
        ));
        // Exactly one retry happened.
        assert_eq!(gateway.telemetry.repairs.load(std::sync::atomic::Ordering::SeqCst), 1);
    }
}
