//! Plan execution: topological scheduling with parallel independent
//! branches, per-node retry then fallback, a cross-request result cache,
//! runtime re-parameterization and persisted telemetry.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::bind::TelemetryStore;
use super::operator::{DataBatch, Registry};
use super::plan::{ExecUnit, PlanDag};
use super::TaskError;
use crate::catalog::Catalog;
use crate::gateway::{Gateway, GatewayError};
use crate::index::PartitionedIndex;
use crate::par::{self, ExecMode};
use crate::store::ModelStore;

/// Shared services every operator can reach.
pub struct ExecEnv {
    pub catalog: Arc<Catalog>,
    pub indexes: Arc<RwLock<BTreeMap<String, PartitionedIndex>>>,
    pub store: Option<Arc<ModelStore>>,
    pub gateway: Arc<Gateway>,
    /// Cross-request cache of node results keyed by (ops, params, input
    /// digests).
    pub plan_cache: Arc<Mutex<HashMap<u64, BTreeMap<String, DataBatch>>>>,
    /// Runtime re-parameterization state: operator id -> reduced batch
    /// size after a latency overshoot.
    pub batch_overrides: Arc<Mutex<BTreeMap<String, usize>>>,
}

impl ExecEnv {
    pub fn minimal(catalog: Arc<Catalog>, gateway: Arc<Gateway>) -> Self {
        ExecEnv {
            catalog,
            indexes: Arc::new(RwLock::new(BTreeMap::new())),
            store: None,
            gateway,
            plan_cache: Arc::new(Mutex::new(HashMap::new())),
            batch_overrides: Arc::new(Mutex::new(BTreeMap::new())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RuntimeConfig {
    pub workers: usize,
    pub latency_budget_ms: Option<f64>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            workers: std::thread::available_parallelism()
                .map(|v| v.get())
                .unwrap_or(2),
            latency_budget_ms: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeTelemetry {
    pub step: String,
    pub op: String,
    pub wall_ms: f64,
    pub rows: u64,
    pub cache_hit: bool,
    pub retries: u32,
    pub fallback_used: bool,
    pub batch_reduced: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ExecStatus {
    Complete,
    Partial { reason: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExecReport {
    /// Channel name -> output batch, for every produced channel.
    pub outputs: BTreeMap<String, DataBatch>,
    pub telemetry: Vec<NodeTelemetry>,
    pub status: ExecStatus,
}

impl ExecReport {
    /// Outputs of the plan's sink channels (those nothing consumes).
    pub fn sink(&self, channel: &str) -> Option<&DataBatch> {
        self.outputs.get(channel)
    }
}

fn run_unit(
    env: &ExecEnv,
    registry: &Registry,
    unit: &ExecUnit,
    inputs: &[DataBatch],
    retries: u32,
) -> Result<(DataBatch, u32, bool), TaskError> {
    let attempt = |ops: &[(String, BTreeMap<String, String>)]| -> Result<DataBatch, TaskError> {
        let mut current: Option<DataBatch> = None;
        for (op_id, params) in ops {
            let implementation = registry
                .implementation(op_id)
                .ok_or_else(|| TaskError::Internal(format!("operator `{op_id}` has no implementation")))?;
            // Runtime batch-size overrides apply to subsequent runs of the
            // same operator.
            let mut params = params.clone();
            if let Some(reduced) = env.batch_overrides.lock().unwrap().get(op_id) {
                params.insert("batch_size".to_string(), reduced.to_string());
            }
            let step_inputs: Vec<DataBatch> = match &current {
                None => inputs.to_vec(),
                Some(prev) => vec![prev.clone()],
            };
            current = Some(implementation(env, &step_inputs, &params)?);
        }
        current.ok_or_else(|| TaskError::Internal("unit with no ops".into()))
    };

    let mut used_retries = 0;
    let mut last_err = None;
    for _ in 0..=retries {
        match attempt(&unit.ops) {
            Ok(batch) => return Ok((batch, used_retries, false)),
            Err(e @ TaskError::Gateway(GatewayError::BudgetExhausted(_))) => return Err(e),
            Err(e) => {
                last_err = Some(e);
                used_retries += 1;
            }
        }
    }
    // Switch the unit's head operator to the fallback variant.
    if let Some(fallback) = &unit.fallback {
        let mut ops = unit.ops.clone();
        ops[0].0 = fallback.clone();
        match attempt(&ops) {
            Ok(batch) => return Ok((batch, used_retries, true)),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| TaskError::Internal("unit failed with no error".into())))
}

/// Executes a validated plan. Nodes run in topological order; independent
/// nodes within a level run concurrently up to their annotated degree and
/// the worker budget. A failing node retries once, then switches to its
/// fallback variant, and only then fails the plan. A node exceeding twice
/// its declared latency estimate halves the batch size for later uses of
/// the same operator. When the plan-level latency budget runs out the
/// report carries the partial results with a budget-exceeded status.
pub fn execute(
    plan: &PlanDag,
    env: &ExecEnv,
    registry: &Registry,
    runtime: &RuntimeConfig,
) -> Result<ExecReport, TaskError> {
    plan.validate()?;
    let levels = plan.topo_levels()?;
    let started = Instant::now();
    let mut results: HashMap<(usize, String), DataBatch> = HashMap::new();
    let mut telemetry = Vec::new();
    let mut status = ExecStatus::Complete;

    'levels: for level in levels {
        if let Some(budget) = runtime.latency_budget_ms {
            if started.elapsed().as_secs_f64() * 1000.0 > budget {
                status = ExecStatus::Partial {
                    reason: "latency budget exceeded".into(),
                };
                break 'levels;
            }
        }
        // Gather each node's inputs up front; nodes inside a level are
        // mutually independent.
        let mut jobs = Vec::new();
        for &node_id in &level {
            let mut inputs = Vec::new();
            for edge in plan.inputs_of(node_id) {
                let key = (edge.from, edge.channel.clone());
                let batch = results
                    .get(&key)
                    .ok_or_else(|| TaskError::Internal(format!("missing input {key:?}")))?
                    .clone();
                inputs.push(batch);
            }
            jobs.push((node_id, inputs));
        }
        let width = jobs
            .iter()
            .map(|(id, _)| plan.nodes[*id].annotations.parallelism)
            .max()
            .unwrap_or(1);
        let mode = if runtime.workers > 1 && width > 1 {
            ExecMode::auto()
        } else {
            ExecMode::Sequential
        };

        let outcomes = par::map(mode, &jobs, |(node_id, inputs)| {
            run_node(plan, *node_id, inputs, env, registry)
        });

        for ((node_id, _), outcome) in jobs.iter().zip(outcomes) {
            match outcome {
                Ok((channel_outputs, node_telemetry)) => {
                    for t in node_telemetry {
                        telemetry.push(t);
                    }
                    for (channel, batch) in channel_outputs {
                        results.insert((*node_id, channel), batch);
                    }
                }
                Err(TaskError::Gateway(GatewayError::BudgetExhausted(detail))) => {
                    status = ExecStatus::Partial {
                        reason: format!("gateway budget exceeded: {detail}"),
                    };
                    break 'levels;
                }
                Err(e) => return Err(e),
            }
        }
    }

    // Surface every produced channel; sinks are the interesting ones but
    // intermediate channels help explanations and tests.
    let mut outputs = BTreeMap::new();
    for ((_, channel), batch) in results {
        outputs.insert(channel, batch);
    }
    Ok(ExecReport {
        outputs,
        telemetry,
        status,
    })
}

type NodeOutcome = Result<(BTreeMap<String, DataBatch>, Vec<NodeTelemetry>), TaskError>;

fn run_node(
    plan: &PlanDag,
    node_id: usize,
    inputs: &[DataBatch],
    env: &ExecEnv,
    registry: &Registry,
) -> NodeOutcome {
    let node = &plan.nodes[node_id];
    let mut outputs = BTreeMap::new();
    let mut telemetry = Vec::new();

    // Cross-request cache: key over unit definitions and input digests.
    let cache_key = if node.annotations.cache {
        let mut body = serde_json::to_vec(&node.units).unwrap_or_default();
        for b in inputs {
            body.extend_from_slice(&b.digest().to_le_bytes());
        }
        Some(crate::util::fnv1a64(&body))
    } else {
        None
    };
    if let Some(key) = cache_key {
        if let Some(hit) = env.plan_cache.lock().unwrap().get(&key) {
            for (channel, batch) in hit {
                outputs.insert(channel.clone(), batch.clone());
            }
            telemetry.push(NodeTelemetry {
                step: node.step.clone(),
                op: node.primary_op().to_string(),
                wall_ms: 0.0,
                rows: outputs.values().map(|b| b.row_count() as u64).sum(),
                cache_hit: true,
                retries: 0,
                fallback_used: false,
                batch_reduced: false,
            });
            return Ok((outputs, telemetry));
        }
    }

    for unit in &node.units {
        let t0 = Instant::now();
        let (batch, retries, fallback_used) =
            match run_unit(env, registry, unit, inputs, node.annotations.retries) {
                Ok(v) => v,
                // Budget exhaustion must bubble untouched so the caller
                // can downgrade to a partial-results status.
                Err(e @ TaskError::Gateway(GatewayError::BudgetExhausted(_))) => return Err(e),
                Err(e) => {
                    return Err(TaskError::NodeFailed {
                        step: unit.channel.clone(),
                        reason: e.to_string(),
                    })
                }
            };
        let wall_ms = t0.elapsed().as_secs_f64() * 1000.0;
        let rows = batch.row_count() as u64;

        // Re-parameterization hook: a node exceeding twice its declared
        // latency estimate halves the operator's batch size for
        // subsequent waves.
        let mut batch_reduced = false;
        let op_id = &unit.ops[0].0;
        if let Some(spec) = registry.spec(op_id) {
            let declared = spec.estimated_cost_ms(node.est_rows).max(1.0);
            if wall_ms > 2.0 * declared {
                let mut overrides = env.batch_overrides.lock().unwrap();
                let current = overrides.get(op_id).copied().unwrap_or(spec.max_batch);
                overrides.insert(op_id.clone(), (current / 2).max(1));
                batch_reduced = true;
            }
        }

        telemetry.push(NodeTelemetry {
            step: unit.channel.clone(),
            op: op_id.clone(),
            wall_ms,
            rows,
            cache_hit: false,
            retries,
            fallback_used,
            batch_reduced,
        });
        outputs.insert(unit.channel.clone(), batch);
    }

    if let Some(key) = cache_key {
        env.plan_cache.lock().unwrap().insert(key, outputs.clone());
    }
    Ok((outputs, telemetry))
}

/// Persists node telemetry for future binding decisions.
pub fn persist_telemetry(store: &TelemetryStore, telemetry: &[NodeTelemetry]) {
    for t in telemetry {
        if !t.cache_hit {
            store.record(&t.op, t.wall_ms, t.rows);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{DatasetDescriptor, FieldDef, FieldKind, Record, Value};
    use crate::gateway::{GatewayBudget, MockBackend};
    use crate::task::operator::{
        standard_registry, CapabilitySignature, DataType, LatencyProfile, OperatorFamily,
        OperatorSpec,
    };
    use crate::task::plan::{Annotations, ExecUnit, PlanEdge, PlanNode};

    fn env_with_rows(n: usize) -> ExecEnv {
        let catalog = Catalog::new();
        let h = catalog
            .register_dataset(DatasetDescriptor::new(
                "d",
                vec![FieldDef {
                    name: "x".into(),
                    kind: FieldKind::Numeric,
                }],
            ))
            .unwrap();
        let records: Vec<Record> = (0..n)
            .map(|i| Record::new(format!("r{i:03}")).with("x", Value::Number(i as f64)))
            .collect();
        h.write().unwrap().ingest(records);
        let gateway = Gateway::new(
            Arc::new(MockBackend::with_standard_rules(1)),
            GatewayBudget::unlimited(),
        );
        ExecEnv::minimal(Arc::new(catalog), Arc::new(gateway))
    }

    fn simple_node(
        id: usize,
        step: &str,
        op: &str,
        inputs: Vec<DataType>,
        output: DataType,
        params: BTreeMap<String, String>,
        fallback: Option<String>,
    ) -> PlanNode {
        PlanNode {
            id,
            step: step.into(),
            family: OperatorFamily::Data,
            units: vec![ExecUnit {
                channel: step.into(),
                ops: vec![(op.into(), params)],
                output,
                fallback,
            }],
            inputs,
            annotations: Annotations {
                parallelism: 1,
                cache: false,
                retries: 1,
            },
            materialize: false,
            pushdown: false,
            est_rows: 10.0,
        }
    }

    fn scan_params() -> BTreeMap<String, String> {
        let mut p = BTreeMap::new();
        p.insert("dataset".to_string(), "d".to_string());
        p
    }

    #[test]
    fn linear_plan_equals_direct_composition() {
        let env = env_with_rows(10);
        let registry = standard_registry();
        let mut dag = PlanDag::default();
        dag.nodes.push(simple_node(
            0,
            "load",
            "scan",
            vec![],
            DataType::Records,
            scan_params(),
            None,
        ));
        let mut filter_params = scan_params();
        filter_params.insert("constraint_field".into(), "x".into());
        filter_params.insert(
            "profile".into(),
            serde_json::to_string(&crate::search::ConstraintProfile {
                range: Some((3.0, 7.0)),
                ..Default::default()
            })
            .unwrap(),
        );
        dag.nodes.push(simple_node(
            1,
            "filter",
            "filter-scan",
            vec![DataType::Records],
            DataType::Records,
            filter_params.clone(),
            None,
        ));
        let mut proj_params = BTreeMap::new();
        proj_params.insert("fields".to_string(), "x".to_string());
        dag.nodes.push(simple_node(
            2,
            "project",
            "project",
            vec![DataType::Records],
            DataType::Records,
            proj_params.clone(),
            None,
        ));
        dag.edges.push(PlanEdge {
            from: 0,
            channel: "load".into(),
            to: 1,
            port: 0,
        });
        dag.edges.push(PlanEdge {
            from: 1,
            channel: "filter".into(),
            to: 2,
            port: 0,
        });
        let report = execute(&dag, &env, &registry, &RuntimeConfig::default()).unwrap();
        assert_eq!(report.status, ExecStatus::Complete);

        // Oracle: compose the three operator functions directly.
        let scan = registry.implementation("scan").unwrap();
        let filter = registry.implementation("filter-scan").unwrap();
        let project = registry.implementation("project").unwrap();
        let direct = project(
            &env,
            &[filter(&env, &[scan(&env, &[], &scan_params()).unwrap()], &filter_params).unwrap()],
            &proj_params,
        )
        .unwrap();
        assert_eq!(report.outputs.get("project"), Some(&direct));
        match &direct {
            DataBatch::Records(r) => assert_eq!(r.len(), 5), // x in [3,7]
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn failing_primary_switches_to_fallback() {
        let env = env_with_rows(5);
        let mut registry = standard_registry();
        // A primary that always fails, with scan as the fallback.
        registry.register(
            OperatorSpec {
                id: "flaky-scan".into(),
                family: OperatorFamily::Data,
                capability: "load".into(),
                signature: CapabilitySignature {
                    inputs: vec![],
                    output: DataType::Records,
                },
                selectivity_hint: 1.0,
                latency: LatencyProfile {
                    fixed_ms: 1.0,
                    per_row_ms: 0.0,
                },
                memory_per_row: 1.0,
                cacheable: false,
                deterministic: true,
                max_batch: 1,
                version: "1".into(),
                needs_index: false,
                expected_accuracy: 0.9,
                fusable: false,
            },
            Arc::new(|_env: &ExecEnv, _inputs, _params| {
                Err(TaskError::Internal("injected fault".into()))
            }),
        );
        let mut dag = PlanDag::default();
        dag.nodes.push(simple_node(
            0,
            "load",
            "flaky-scan",
            vec![],
            DataType::Records,
            scan_params(),
            Some("scan".into()),
        ));
        let report = execute(&dag, &env, &registry, &RuntimeConfig::default()).unwrap();
        let t = &report.telemetry[0];
        assert!(t.fallback_used, "telemetry must mark the switch");
        assert_eq!(t.retries, 2); // primary tried twice before the switch
        match report.outputs.get("load") {
            Some(DataBatch::Records(r)) => assert_eq!(r.len(), 5),
            other => panic!("unexpected {other:?}"),
        }

        // Without a fallback the plan fails naming the node.
        let mut dag2 = PlanDag::default();
        dag2.nodes.push(simple_node(
            0,
            "load",
            "flaky-scan",
            vec![],
            DataType::Records,
            scan_params(),
            None,
        ));
        match execute(&dag2, &env, &registry, &RuntimeConfig::default()) {
            Err(TaskError::NodeFailed { step, reason }) => {
                assert_eq!(step, "load");
                assert!(reason.contains("injected fault"));
            }
            other => panic!("expected NodeFailed, got {other:?}"),
        }
    }

    #[test]
    #[cfg(feature = "parallel")]
    fn independent_branches_run_concurrently() {
        let env = env_with_rows(2);
        let mut registry = standard_registry();
        registry.register(
            OperatorSpec {
                id: "sleepy".into(),
                family: OperatorFamily::Data,
                capability: "sleepy".into(),
                signature: CapabilitySignature {
                    inputs: vec![],
                    output: DataType::Scores,
                },
                selectivity_hint: 1.0,
                latency: LatencyProfile {
                    fixed_ms: 100.0,
                    per_row_ms: 0.0,
                },
                memory_per_row: 1.0,
                cacheable: false,
                deterministic: false,
                max_batch: 1,
                version: "1".into(),
                needs_index: false,
                expected_accuracy: 1.0,
                fusable: false,
            },
            Arc::new(|_env: &ExecEnv, _inputs, _params| {
                std::thread::sleep(std::time::Duration::from_millis(100));
                Ok(DataBatch::Scores(vec![1.0]))
            }),
        );
        let mut dag = PlanDag::default();
        for (i, name) in ["a", "b"].iter().enumerate() {
            let mut node = simple_node(
                i,
                name,
                "sleepy",
                vec![],
                DataType::Scores,
                BTreeMap::new(),
                None,
            );
            node.annotations.parallelism = 2;
            dag.nodes.push(node);
        }
        let t0 = Instant::now();
        let report = execute(
            &dag,
            &env,
            &registry,
            &RuntimeConfig {
                workers: 2,
                latency_budget_ms: None,
            },
        )
        .unwrap();
        let wall = t0.elapsed().as_secs_f64() * 1000.0;
        assert_eq!(report.outputs.len(), 2);
        // Two 100 ms branches on two workers: clearly below the 200 ms
        // serial sum.
        assert!(wall < 185.0, "branches did not overlap: {wall:.1} ms");
    }

    #[test]
    fn latency_budget_yields_partial_results() {
        let env = env_with_rows(3);
        let mut registry = standard_registry();
        registry.register(
            OperatorSpec {
                id: "slow".into(),
                family: OperatorFamily::Data,
                capability: "slow".into(),
                signature: CapabilitySignature {
                    inputs: vec![DataType::Records],
                    output: DataType::Records,
                },
                selectivity_hint: 1.0,
                latency: LatencyProfile {
                    fixed_ms: 30.0,
                    per_row_ms: 0.0,
                },
                memory_per_row: 1.0,
                cacheable: false,
                deterministic: true,
                max_batch: 1,
                version: "1".into(),
                needs_index: false,
                expected_accuracy: 1.0,
                fusable: false,
            },
            Arc::new(|_env: &ExecEnv, inputs, _params| {
                std::thread::sleep(std::time::Duration::from_millis(30));
                Ok(inputs[0].clone())
            }),
        );
        let mut dag = PlanDag::default();
        dag.nodes.push(simple_node(
            0,
            "load",
            "scan",
            vec![],
            DataType::Records,
            scan_params(),
            None,
        ));
        dag.nodes.push(simple_node(
            1,
            "slow1",
            "slow",
            vec![DataType::Records],
            DataType::Records,
            BTreeMap::new(),
            None,
        ));
        dag.nodes.push(simple_node(
            2,
            "slow2",
            "slow",
            vec![DataType::Records],
            DataType::Records,
            BTreeMap::new(),
            None,
        ));
        dag.edges.push(PlanEdge {
            from: 0,
            channel: "load".into(),
            to: 1,
            port: 0,
        });
        dag.edges.push(PlanEdge {
            from: 1,
            channel: "slow1".into(),
            to: 2,
            port: 0,
        });
        let report = execute(
            &dag,
            &env,
            &registry,
            &RuntimeConfig {
                workers: 1,
                latency_budget_ms: Some(20.0),
            },
        )
        .unwrap();
        assert!(matches!(report.status, ExecStatus::Partial { .. }));
        // The scan completed before the budget ran out.
        assert!(report.outputs.contains_key("load"));
        assert!(!report.outputs.contains_key("slow2"));
    }

    #[test]
    fn cache_hits_are_reported_and_reused() {
        let env = env_with_rows(4);
        let registry = standard_registry();
        let mut dag = PlanDag::default();
        let mut node = simple_node(
            0,
            "load",
            "scan",
            vec![],
            DataType::Records,
            scan_params(),
            None,
        );
        node.annotations.cache = true;
        dag.nodes.push(node);
        let first = execute(&dag, &env, &registry, &RuntimeConfig::default()).unwrap();
        assert!(!first.telemetry[0].cache_hit);
        let second = execute(&dag, &env, &registry, &RuntimeConfig::default()).unwrap();
        assert!(second.telemetry[0].cache_hit);
        assert_eq!(first.outputs, second.outputs);
    }

    #[test]
    fn latency_overshoot_reduces_batch_size() {
        let env = env_with_rows(2);
        let mut registry = standard_registry();
        registry.register(
            OperatorSpec {
                id: "overrun".into(),
                family: OperatorFamily::Data,
                capability: "overrun".into(),
                signature: CapabilitySignature {
                    inputs: vec![],
                    output: DataType::Scores,
                },
                selectivity_hint: 1.0,
                latency: LatencyProfile {
                    fixed_ms: 1.0,
                    per_row_ms: 0.0,
                },
                memory_per_row: 1.0,
                cacheable: false,
                deterministic: false,
                max_batch: 64,
                version: "1".into(),
                needs_index: false,
                expected_accuracy: 1.0,
                fusable: false,
            },
            Arc::new(|_env: &ExecEnv, _inputs, _params| {
                std::thread::sleep(std::time::Duration::from_millis(25));
                Ok(DataBatch::Scores(vec![0.0]))
            }),
        );
        let mut dag = PlanDag::default();
        dag.nodes.push(simple_node(
            0,
            "hot",
            "overrun",
            vec![],
            DataType::Scores,
            BTreeMap::new(),
            None,
        ));
        let report = execute(&dag, &env, &registry, &RuntimeConfig::default()).unwrap();
        assert!(report.telemetry[0].batch_reduced);
        assert_eq!(
            env.batch_overrides.lock().unwrap().get("overrun").copied(),
            Some(32)
        );
    }
}
