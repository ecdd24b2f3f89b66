//! Cross-module task-engine checks: randomized differential testing of
//! the DAG optimizer and the full declarative path.

use std::collections::BTreeMap;
use std::sync::Arc;

use aixel_core::catalog::{Catalog, DatasetDescriptor, FieldDef, FieldKind, Record, Value};
use aixel_core::gateway::{Gateway, GatewayBudget, MockBackend};
use aixel_core::search::ConstraintProfile;
use aixel_core::task::{
    execute, optimize_dag, standard_registry, Annotations, DataType, ExecEnv, ExecUnit,
    OperatorFamily, PlanDag, PlanEdge, PlanNode, RuntimeConfig, DEFAULT_CONTEXT_BUDGET,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn env_with_dataset(rows: usize) -> ExecEnv {
    let catalog = Catalog::new();
    let handle = catalog
        .register_dataset(DatasetDescriptor::new(
            "d",
            vec![
                FieldDef {
                    name: "x".into(),
                    kind: FieldKind::Numeric,
                },
                FieldDef {
                    name: "group".into(),
                    kind: FieldKind::Categorical,
                },
                FieldDef {
                    name: "tags".into(),
                    kind: FieldKind::LabelSet,
                },
            ],
        ))
        .unwrap();
    let records: Vec<Record> = (0..rows)
        .map(|i| {
            Record::new(format!("r{i:04}"))
                .at(i as i64)
                .with("x", Value::Number((i % 97) as f64))
                .with("group", Value::Text(["a", "b", "c"][i % 3].into()))
                .with(
                    "tags",
                    Value::Labels(if i % 2 == 0 {
                        vec!["even".into()]
                    } else {
                        vec!["odd".into()]
                    }),
                )
        })
        .collect();
    handle.write().unwrap().ingest(records);
    let gateway = Gateway::new(
        Arc::new(MockBackend::with_standard_rules(3)),
        GatewayBudget::unlimited(),
    );
    ExecEnv::minimal(Arc::new(catalog), Arc::new(gateway))
}

fn node(
    id: usize,
    step: &str,
    op: &str,
    inputs: Vec<DataType>,
    output: DataType,
    params: BTreeMap<String, String>,
) -> PlanNode {
    PlanNode {
        id,
        step: step.to_string(),
        family: OperatorFamily::Data,
        units: vec![ExecUnit {
            channel: step.to_string(),
            ops: vec![(op.to_string(), params)],
            output,
            fallback: None,
        }],
        inputs,
        annotations: Annotations {
            parallelism: 1,
            cache: false,
            retries: 1,
        },
        materialize: false,
        pushdown: false,
        est_rows: 100.0,
    }
}

/// Random deterministic data-operator plan: a scan root plus a random mix
/// of filter and project nodes hanging off earlier nodes.
fn random_plan(rng: &mut StdRng) -> PlanDag {
    let mut dag = PlanDag::default();
    let mut scan_params = BTreeMap::new();
    scan_params.insert("dataset".to_string(), "d".to_string());
    dag.nodes.push(node(
        0,
        "load",
        "scan",
        vec![],
        DataType::Records,
        scan_params,
    ));
    let extra = rng.random_range(1..=6);
    for i in 1..=extra {
        let parent = rng.random_range(0..i);
        let step = format!("n{i}");
        let (op, params) = if rng.random_range(0.0..1.0) < 0.5 {
            let lo = rng.random_range(0.0..60.0);
            let hi = lo + rng.random_range(5.0..40.0);
            let profile = ConstraintProfile {
                range: Some((lo, hi)),
                ..Default::default()
            };
            let mut p = BTreeMap::new();
            p.insert("constraint_field".to_string(), "x".to_string());
            p.insert("profile".to_string(), serde_json::to_string(&profile).unwrap());
            ("filter-scan", p)
        } else {
            let fields = if rng.random_range(0.0..1.0) < 0.5 {
                "x,group"
            } else {
                "x,group,tags"
            };
            let mut p = BTreeMap::new();
            p.insert("fields".to_string(), fields.to_string());
            ("project", p)
        };
        dag.nodes.push(node(
            i,
            &step,
            op,
            vec![DataType::Records],
            DataType::Records,
            params,
        ));
        dag.edges.push(PlanEdge {
            from: parent,
            channel: dag.nodes[parent].units.last().unwrap().channel.clone(),
            to: i,
            port: 0,
        });
    }
    dag
}

fn sink_channels(dag: &PlanDag) -> Vec<String> {
    let mut sinks = Vec::new();
    for (i, n) in dag.nodes.iter().enumerate() {
        if dag.consumers_of(i).is_empty() {
            for u in &n.units {
                sinks.push(u.channel.clone());
            }
        }
    }
    sinks.sort();
    sinks
}

#[test]
fn optimizer_preserves_outputs_on_random_plans() {
    let env = env_with_dataset(300);
    let registry = standard_registry();
    let runtime = RuntimeConfig {
        workers: 1,
        latency_budget_ms: None,
    };
    let mut rng = StdRng::seed_from_u64(90);
    let mut merged_plans = 0usize;
    for round in 0..120 {
        let plan = random_plan(&mut rng);
        plan.validate().unwrap_or_else(|e| panic!("round {round}: invalid base plan: {e}"));
        let (optimized, log) = optimize_dag(&plan, &registry, DEFAULT_CONTEXT_BUDGET).unwrap();
        optimized
            .validate()
            .unwrap_or_else(|e| panic!("round {round}: rewrite broke validity: {e}"));
        if optimized.nodes.len() < plan.nodes.len() {
            merged_plans += 1;
            // Every applied merge carries all-passing guards.
            for entry in log.iter().filter(|e| e.applied) {
                assert!(
                    entry.guards.iter().all(|(_, ok)| *ok),
                    "round {round}: applied merge with failing guard: {entry:?}"
                );
            }
        }
        let before = execute(&plan, &env, &registry, &runtime).unwrap();
        let after = execute(&optimized, &env, &registry, &runtime).unwrap();
        for channel in sink_channels(&plan) {
            assert_eq!(
                before.outputs.get(&channel),
                after.outputs.get(&channel),
                "round {round}: channel `{channel}` diverged"
            );
        }
    }
    assert!(
        merged_plans > 20,
        "generator should produce mergeable plans, got {merged_plans}"
    );
}

#[test]
fn declarative_search_path_end_to_end() {
    use aixel_core::config::EngineConfig;
    use aixel_core::engine::Engine;
    use aixel_core::task::DeclarativeRequest;

    let dir = tempfile::tempdir().unwrap();
    let config = EngineConfig {
        data_dir: dir.path().to_path_buf(),
        workers: 2,
        ..Default::default()
    };
    let engine = Engine::open(config).unwrap();
    engine
        .register_dataset(DatasetDescriptor::new(
            "docs",
            vec![
                FieldDef {
                    name: "price".into(),
                    kind: FieldKind::Numeric,
                },
                FieldDef {
                    name: "emb".into(),
                    kind: FieldKind::Vector { dim: 4 },
                },
                FieldDef {
                    name: "tags".into(),
                    kind: FieldKind::LabelSet,
                },
            ],
        ))
        .unwrap();
    let records: Vec<Record> = (0..200)
        .map(|i| {
            let a = i as f32 * 0.21;
            Record::new(format!("d{i:03}"))
                .at(i as i64)
                .with("price", Value::Number((i % 50) as f64))
                .with(
                    "emb",
                    Value::Vector(vec![a.cos(), a.sin(), (2.0 * a).cos(), (2.0 * a).sin()]),
                )
                .with("tags", Value::Labels(vec![if i % 2 == 0 { "new" } else { "used" }.into()]))
        })
        .collect();
    engine.ingest("docs", records).unwrap();
    engine.build_index("docs", "price", Some("tags"), false).unwrap();

    let mut preferences = BTreeMap::new();
    preferences.insert("query".to_string(), "[1.0, 0.0, 1.0, 0.0]".to_string());
    preferences.insert("k".to_string(), "5".to_string());
    preferences.insert("outputs".to_string(), "price".to_string());
    let request = DeclarativeRequest {
        objective: "search".into(),
        dataset: Some("docs".into()),
        filters: vec![aixel_core::task::RequestFilter {
            field: "price".into(),
            op: "between".into(),
            value: serde_json::json!([10, 30]),
            mode: None,
        }],
        preferences,
        ..Default::default()
    };
    let outcome = engine.task_run(&request).unwrap();
    assert_eq!(outcome.report.status, aixel_core::task::ExecStatus::Complete);
    // The retrieval step bound to the index route with the scan as the
    // fallback (dual routes retained).
    let retrieve = outcome.bound.iter().find(|b| b.step == "retrieve").unwrap();
    assert_eq!(retrieve.primary, "index-search");
    assert_eq!(retrieve.fallback.as_deref(), Some("scan-rank"));
    // Evidence JSON lists only constraint-satisfying records.
    let evidence = outcome.report.outputs.get("evidence").unwrap();
    match evidence {
        aixel_core::task::DataBatch::Json(serde_json::Value::Array(items)) => {
            assert!(!items.is_empty());
            for item in items {
                let price = item["values"]["price"].as_f64().unwrap();
                assert!((10.0..=30.0).contains(&price));
            }
        }
        other => panic!("unexpected evidence payload: {other:?}"),
    }
}

#[test]
fn declarative_answer_path_uses_gateway() {
    use aixel_core::config::EngineConfig;
    use aixel_core::engine::Engine;
    use aixel_core::task::DeclarativeRequest;

    let dir = tempfile::tempdir().unwrap();
    let config = EngineConfig {
        data_dir: dir.path().to_path_buf(),
        workers: 2,
        ..Default::default()
    };
    let engine = Engine::open(config).unwrap();
    engine
        .register_dataset(DatasetDescriptor::new(
            "kb",
            vec![
                FieldDef {
                    name: "score".into(),
                    kind: FieldKind::Numeric,
                },
                FieldDef {
                    name: "emb".into(),
                    kind: FieldKind::Vector { dim: 2 },
                },
            ],
        ))
        .unwrap();
    let records: Vec<Record> = (0..50)
        .map(|i| {
            let a = i as f32 * 0.5;
            Record::new(format!("k{i:02}"))
                .with("score", Value::Number(i as f64))
                .with("emb", Value::Vector(vec![a.cos(), a.sin()]))
        })
        .collect();
    engine.ingest("kb", records).unwrap();
    engine.build_index("kb", "score", None, false).unwrap();

    let mut preferences = BTreeMap::new();
    preferences.insert("query".to_string(), "[0.5, 0.5]".to_string());
    let request = DeclarativeRequest {
        objective: "answer".into(),
        dataset: Some("kb".into()),
        target: Some("what is the best item?".into()),
        preferences,
        ..Default::default()
    };
    let outcome = engine.task_run(&request).unwrap();
    let answer = outcome.report.outputs.get("answer").unwrap();
    match answer {
        aixel_core::task::DataBatch::Json(v) => {
            assert!(v["answer"].as_str().unwrap().starts_with("echo:"));
        }
        other => panic!("unexpected answer payload: {other:?}"),
    }
    assert!(engine.gateway.backend_calls() >= 1);
}

#[test]
fn label_filters_flow_through_declarative_path() {
    use aixel_core::config::EngineConfig;
    use aixel_core::engine::Engine;
    use aixel_core::task::DeclarativeRequest;

    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(EngineConfig {
        data_dir: dir.path().to_path_buf(),
        ..Default::default()
    })
    .unwrap();
    engine
        .register_dataset(DatasetDescriptor::new(
            "docs",
            vec![
                FieldDef {
                    name: "price".into(),
                    kind: FieldKind::Numeric,
                },
                FieldDef {
                    name: "emb".into(),
                    kind: FieldKind::Vector { dim: 2 },
                },
                FieldDef {
                    name: "tags".into(),
                    kind: FieldKind::LabelSet,
                },
            ],
        ))
        .unwrap();
    let records: Vec<Record> = (0..60)
        .map(|i| {
            let a = i as f32;
            Record::new(format!("d{i:02}"))
                .with("price", Value::Number(i as f64))
                .with("emb", Value::Vector(vec![a.cos(), a.sin()]))
                .with(
                    "tags",
                    Value::Labels(if i % 3 == 0 {
                        vec!["sale".into()]
                    } else {
                        vec!["full".into()]
                    }),
                )
        })
        .collect();
    engine.ingest("docs", records).unwrap();
    engine.build_index("docs", "price", Some("tags"), false).unwrap();

    let mut preferences = BTreeMap::new();
    preferences.insert("query".to_string(), "[1.0, 0.0]".to_string());
    preferences.insert("outputs".to_string(), "tags".to_string());
    let request = DeclarativeRequest {
        objective: "search".into(),
        dataset: Some("docs".into()),
        filters: vec![aixel_core::task::RequestFilter {
            field: "tags".into(),
            op: "has-labels".into(),
            value: serde_json::json!(["sale"]),
            mode: None,
        }],
        preferences,
        ..Default::default()
    };
    let outcome = engine.task_run(&request).unwrap();
    let evidence = outcome.report.outputs.get("evidence").unwrap();
    match evidence {
        aixel_core::task::DataBatch::Json(serde_json::Value::Array(items)) => {
            assert!(!items.is_empty());
            for item in items {
                let tags = item["values"]["tags"].as_array().unwrap();
                assert!(tags.iter().any(|t| t == "sale"));
            }
        }
        other => panic!("unexpected evidence payload: {other:?}"),
    }
}
