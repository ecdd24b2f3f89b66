//! `aixel`: command-line front end for the analysis engine.
//!
//! Subcommands map onto the engine modules: `ingest`, `index build`,
//! `search`, `select`, `features`, `model train|commit|branch|merge|log|resolve`,
//! `drift register|observe|watch` and `task run`. Output is a human table
//! by default or JSON with `--json`. Exit codes: 0 success, 1 user error
//! (named cause on stderr), 2 internal error.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use aixel_core::catalog::{self, LabelMode};
use aixel_core::config::EngineConfig;
use aixel_core::drift::MonitoringSpec;
use aixel_core::engine::{parse_range_flag, Engine, EngineError};
use aixel_core::search::{Filter, RankWeights};
use aixel_core::select::SelectionSpec;
use aixel_core::store::{ArtifactKind, MergePolicy, TaskFit};
use aixel_core::task::DeclarativeRequest;
use aixel_core::train::{MetricKind, TrainerSpec};

#[derive(Parser)]
#[command(name = "aixel", version, about = "Unified data/model/task analysis engine")]
struct Cli {
    /// Config file (default: ./aixel.toml when present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Data directory override (flags > env > file).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a dataset (if new) and ingest NDJSON records.
    Ingest(IngestArgs),
    /// Index maintenance.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Constraint-aware vector search.
    Search(SearchArgs),
    /// Task-aligned data selection.
    Select(SelectArgs),
    /// Feature view construction, CMI selection and interaction mining.
    Features(FeaturesArgs),
    /// Model lifecycle: train, commit, branch, merge, log, resolve.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Drift monitoring.
    #[command(subcommand)]
    Drift(DriftCommand),
    /// Declarative task execution.
    #[command(subcommand)]
    Task(TaskCommand),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    dataset: String,
    /// Schema JSON (required when the dataset is not yet registered).
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Newline-delimited record JSON.
    #[arg(long)]
    records: PathBuf,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build the fusion index over a dataset's vector field.
    Build(IndexBuildArgs),
}

#[derive(Args)]
struct IndexBuildArgs {
    #[arg(long)]
    dataset: String,
    /// Sortable numeric attribute carried on every node.
    #[arg(long)]
    attr_field: String,
    /// Label-set field copied onto nodes and edges.
    #[arg(long)]
    label_field: Option<String>,
    /// Partition by (tenant, time bucket) instead of tenant only.
    #[arg(long)]
    partition_time: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    dataset: String,
    /// JSON file holding the query vector.
    #[arg(long)]
    vector_file: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Numeric range constraint, field:lo..hi.
    #[arg(long)]
    range: Option<String>,
    /// Comma-separated label predicate.
    #[arg(long)]
    labels: Option<String>,
    #[arg(long, default_value = "any")]
    label_mode: String,
    /// Ranker weights w_sim,w_range,w_label.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    ef: Option<usize>,
    /// Use the exact scan route instead of the graph.
    #[arg(long)]
    exact: bool,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    dataset: String,
    /// Selection spec JSON.
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    dataset: String,
    /// Selection manifest id.
    #[arg(long)]
    workingset: String,
    #[arg(long)]
    target: String,
    /// Feature budget for CMI selection.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Interaction candidates to mine.
    #[arg(long, default_value_t = 4)]
    interactions: usize,
    #[arg(long, default_value = "rmse")]
    metric: String,
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Train on a working set and commit the snapshot.
    Train(ModelTrainArgs),
    /// Commit raw artifact bytes.
    Commit(ModelCommitArgs),
    /// Create a branch at a version.
    Branch(ModelBranchArgs),
    /// Three-way merge of two branches.
    Merge(ModelMergeArgs),
    /// Lineage of a branch head.
    Log(ModelLogArgs),
    /// Resolve the newest compatible snapshot for a task.
    Resolve(ModelResolveArgs),
}

#[derive(Args)]
struct ModelTrainArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    workingset: String,
    #[arg(long)]
    target: String,
    /// Trainer spec JSON; defaults to a regularized-logistic baseline.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "classify")]
    objective: String,
    #[arg(long, default_value = "accuracy")]
    metric: String,
    #[arg(long, default_value = "main")]
    branch: String,
}

#[derive(Args)]
struct ModelCommitArgs {
    #[arg(long, default_value = "main")]
    branch: String,
    /// Artifact kind: index, metadata, tensor or model.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    name: String,
    #[arg(long)]
    file: PathBuf,
    #[arg(long, default_value = "manual commit")]
    message: String,
}

#[derive(Args)]
struct ModelBranchArgs {
    #[arg(long)]
    from: String,
    #[arg(long)]
    name: String,
}

#[derive(Args)]
struct ModelMergeArgs {
    /// Branch receiving the merge.
    #[arg(long)]
    ours: String,
    #[arg(long)]
    theirs: String,
    /// prefer-a | prefer-b | prefer-higher-eval:<metric>
    #[arg(long, default_value = "prefer-a")]
    policy: String,
}

#[derive(Args)]
struct ModelLogArgs {
    #[arg(long, default_value = "main")]
    branch: String,
}

#[derive(Args)]
struct ModelResolveArgs {
    #[arg(long)]
    objective: String,
    #[arg(long, default_value = "")]
    metric: String,
    /// Schema JSON the task offers.
    #[arg(long)]
    schema: PathBuf,
}

#[derive(Subcommand)]
enum DriftCommand {
    /// Register a monitoring spec for a model version.
    Register(DriftRegisterArgs),
    /// Feed scored observations from an NDJSON file.
    Observe(DriftObserveArgs),
    /// Print (or follow) drift events for a model.
    Watch(DriftWatchArgs),
}

#[derive(Args)]
struct DriftRegisterArgs {
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Args)]
struct DriftObserveArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    file: PathBuf,
}

#[derive(Args)]
struct DriftWatchArgs {
    #[arg(long)]
    model: String,
    /// Keep tailing the event log.
    #[arg(long)]
    follow: bool,
}

#[derive(Subcommand)]
enum TaskCommand {
    /// Parse, bind, plan, optimize and execute a declarative request.
    Run(TaskRunArgs),
}

#[derive(Args)]
struct TaskRunArgs {
    /// Request JSON file.
    #[arg(long)]
    request: PathBuf,
    /// Print the plan, binding scores and rewrite log.
    #[arg(long)]
    explain: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Single-line machine-parsable error on stderr.
            let flat = format!("{err:#}").replace('\n', " ");
            eprintln!("error: {flat}");
            let user_error = err
                .downcast_ref::<EngineError>()
                .map(EngineError::is_user_error)
                .unwrap_or(true);
            if user_error {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn open_engine(cli: &Cli) -> Result<Engine> {
    let mut config = EngineConfig::load(cli.config.as_deref()).map_err(EngineError::from)?;
    if let Some(dir) = &cli.data_dir {
        config.data_dir = dir.clone();
    }
    Ok(Engine::open(config)?)
}

fn emit(json: bool, value: serde_json::Value, human: impl FnOnce(&serde_json::Value)) {
    if json {
        println!("{}", serde_json::to_string_pretty(&value).unwrap_or_default());
    } else {
        human(&value);
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(args) => {
            let engine = open_engine(&cli)?;
            if !engine.catalog.contains(&args.dataset) {
                let schema_path = args.schema.as_ref().ok_or_else(|| {
                    anyhow!("dataset `{}` is not registered; pass --schema", args.dataset)
                })?;
                let mut descriptor = catalog::read_schema(
                    std::fs::File::open(schema_path)
                        .with_context(|| format!("cannot open {}", schema_path.display()))?,
                )
                .map_err(EngineError::from)?;
                descriptor.dataset_id = args.dataset.clone();
                engine.register_dataset(descriptor)?;
            }
            let handle = engine.catalog.dataset(&args.dataset).map_err(EngineError::from)?;
            let descriptor = handle.read().unwrap().descriptor().clone();
            let records = catalog::read_records(
                std::io::BufReader::new(
                    std::fs::File::open(&args.records)
                        .with_context(|| format!("cannot open {}", args.records.display()))?,
                ),
                &descriptor,
            )
            .map_err(EngineError::from)?;
            let report = engine.ingest(&args.dataset, records)?;
            emit(
                cli.json,
                serde_json::json!({
                    "dataset": args.dataset,
                    "accepted": report.accepted,
                    "rejected": report.rejected,
                }),
                |v| {
                    println!(
                        "ingested {} records into `{}` ({} rejected)",
                        v["accepted"], args.dataset, v["rejected"].as_array().map(Vec::len).unwrap_or(0)
                    );
                    for r in v["rejected"].as_array().unwrap_or(&Vec::new()) {
                        println!("  rejected {}: {}", r[0], r[1]["reason"]);
                    }
                },
            );
        }
        Command::Index(IndexCommand::Build(args)) => {
            let engine = open_engine(&cli)?;
            let reports = engine.build_index(
                &args.dataset,
                &args.attr_field,
                args.label_field.as_deref(),
                args.partition_time,
            )?;
            let total_nodes: usize = reports.iter().map(|(_, r)| r.nodes).sum();
            emit(
                cli.json,
                serde_json::json!({
                    "dataset": args.dataset,
                    "partitions": reports
                        .iter()
                        .map(|(k, r)| {
                            serde_json::json!({
                                "tenant": k.tenant,
                                "bucket": k.bucket,
                                "nodes": r.nodes,
                                "edges": r.edges,
                                "levels": r.level_histogram,
                            })
                        })
                        .collect::<Vec<_>>(),
                    "nodes": total_nodes,
                }),
                |v| {
                    println!(
                        "built index for `{}`: {} nodes across {} partition(s)",
                        args.dataset,
                        v["nodes"],
                        v["partitions"].as_array().map(Vec::len).unwrap_or(0)
                    );
                },
            );
        }
        Command::Search(args) => {
            let engine = open_engine(&cli)?;
            let raw = std::fs::read_to_string(&args.vector_file)
                .with_context(|| format!("cannot open {}", args.vector_file.display()))?;
            let query: Vec<f32> =
                serde_json::from_str(&raw).context("vector file must be a JSON number array")?;
            let mut filters: Vec<Filter> = Vec::new();
            if let Some(range) = &args.range {
                let (_, fs) = parse_range_flag(range)?;
                filters.extend(fs);
            }
            if let Some(labels) = &args.labels {
                let labels: Vec<String> =
                    labels.split(',').map(|s| s.trim().to_string()).collect();
                let mode = match args.label_mode.as_str() {
                    "all" => LabelMode::All,
                    "any" => LabelMode::Any,
                    other => return Err(anyhow!("unknown label mode `{other}`")),
                };
                filters.push(Filter::HasLabels { labels, mode });
            }
            let weights = match &args.weights {
                Some(w) => {
                    let parts: Vec<f64> = w
                        .split(',')
                        .map(|p| p.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .context("weights must be three comma-separated numbers")?;
                    if parts.len() != 3 {
                        return Err(anyhow!("weights must be w_sim,w_range,w_label"));
                    }
                    Some(RankWeights::new(parts[0], parts[1], parts[2]).map_err(EngineError::from)?)
                }
                None => None,
            };
            let (candidates, visited, diagnostic) = if args.exact {
                let c = engine.search_exact(&args.dataset, &query, args.k, &filters, weights)?;
                (c, 0usize, None)
            } else {
                let out = engine.search(&args.dataset, &query, args.k, &filters, weights, args.ef)?;
                (out.candidates, out.visited, out.diagnostic)
            };
            emit(
                cli.json,
                serde_json::json!({
                    "dataset": args.dataset,
                    "candidates": candidates,
                    "visited": visited,
                    "diagnostic": diagnostic,
                }),
                |v| {
                    let empty = Vec::new();
                    let rows = v["candidates"].as_array().unwrap_or(&empty);
                    if rows.is_empty() {
                        println!(
                            "no results{}",
                            v["diagnostic"].as_str().map(|d| format!(" ({d})")).unwrap_or_default()
                        );
                        return;
                    }
                    println!("{:<14} {:>8} {:>8} {:>8} {:>8}", "id", "score", "sim", "range", "label");
                    for c in rows {
                        println!(
                            "{:<14} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                            c["node_id"].as_str().unwrap_or("?"),
                            c["score"].as_f64().unwrap_or_default(),
                            c["sim"].as_f64().unwrap_or_default(),
                            c["range_fit"].as_f64().unwrap_or_default(),
                            c["label_cov"].as_f64().unwrap_or_default(),
                        );
                    }
                },
            );
        }
        Command::Select(args) => {
            let engine = open_engine(&cli)?;
            let spec: SelectionSpec = serde_json::from_slice(
                &std::fs::read(&args.spec)
                    .with_context(|| format!("cannot open {}", args.spec.display()))?,
            )
            .context("selection spec JSON")?;
            let ws = engine.select(&args.dataset, &spec)?;
            emit(
                cli.json,
                serde_json::to_value(&ws).unwrap_or_default(),
                |v| {
                    println!(
                        "selected {} members -> manifest {}",
                        v["members"].as_array().map(Vec::len).unwrap_or(0),
                        v["manifest_id"].as_str().unwrap_or("?")
                    );
                    for w in v["warnings"].as_array().unwrap_or(&Vec::new()) {
                        println!("  warning: {}", w.as_str().unwrap_or(""));
                    }
                },
            );
        }
        Command::Features(args) => {
            let engine = open_engine(&cli)?;
            let metric = MetricKind::parse(&args.metric)
                .ok_or_else(|| anyhow!("unknown metric `{}`", args.metric))?;
            let manifest = engine.build_features(
                &args.dataset,
                &args.workingset,
                &args.target,
                args.k,
                args.interactions,
                metric,
            )?;
            emit(
                cli.json,
                serde_json::to_value(&manifest).unwrap_or_default(),
                |v| {
                    println!("feature view {}", v["view_id"].as_str().unwrap_or("?"));
                    println!("  selected features:");
                    for f in v["selected"].as_array().unwrap_or(&Vec::new()) {
                        println!(
                            "    {} (gain {:.5})",
                            f["name"].as_str().unwrap_or("?"),
                            f["gain"].as_f64().unwrap_or_default()
                        );
                    }
                    let retained: Vec<String> = v["interactions"]
                        .as_array()
                        .unwrap_or(&Vec::new())
                        .iter()
                        .filter(|c| c["retained"].as_bool().unwrap_or(false))
                        .map(|c| format!("{}×{}", c["pair"][0], c["pair"][1]))
                        .collect();
                    println!("  retained interactions: {}", if retained.is_empty() { "none".to_string() } else { retained.join(", ") });
                },
            );
        }
        Command::Model(cmd) => run_model(&cli, cmd)?,
        Command::Drift(cmd) => run_drift(&cli, cmd)?,
        Command::Task(TaskCommand::Run(args)) => {
            let engine = open_engine(&cli)?;
            let request: DeclarativeRequest = serde_json::from_slice(
                &std::fs::read(&args.request)
                    .with_context(|| format!("cannot open {}", args.request.display()))?,
            )
            .context("request JSON")?;
            let outcome = engine.task_run(&request)?;
            let mut payload = serde_json::json!({
                "objective": outcome.spec.objective,
                "status": outcome.report.status,
                "outputs": outcome.report.outputs,
                "telemetry": outcome.report.telemetry,
            });
            if args.explain {
                payload["binding"] = serde_json::to_value(&outcome.bound).unwrap_or_default();
                payload["plan"] = serde_json::to_value(&outcome.optimized).unwrap_or_default();
                payload["rewrites"] = serde_json::to_value(&outcome.rewrite_log).unwrap_or_default();
            }
            emit(cli.json, payload, |v| {
                println!("status: {:?}", outcome.report.status);
                if args.explain {
                    println!("binding:");
                    for b in &outcome.bound {
                        println!(
                            "  {} -> {} (score {:.4}{})",
                            b.step,
                            b.primary,
                            b.score,
                            b.fallback
                                .as_deref()
                                .map(|f| format!(", fallback {f}"))
                                .unwrap_or_default()
                        );
                        for (name, raw, weighted) in &b.breakdown {
                            println!("      {name:<18} {raw:>7.4} -> {weighted:>7.4}");
                        }
                    }
                    println!("plan:");
                    for node in &outcome.optimized.nodes {
                        println!(
                            "  [{}] {} ops={:?} parallelism={} cache={} materialize={}{}",
                            node.id,
                            node.step,
                            node.units
                                .iter()
                                .flat_map(|u| u.ops.iter().map(|(id, _)| id.as_str()))
                                .collect::<Vec<_>>(),
                            node.annotations.parallelism,
                            node.annotations.cache,
                            node.materialize,
                            if node.pushdown { " pushdown" } else { "" },
                        );
                    }
                    println!("rewrites:");
                    for r in &outcome.rewrite_log {
                        println!(
                            "  {} {:?} applied={} guards={:?}",
                            r.rule, r.nodes, r.applied, r.guards
                        );
                    }
                }
                let keys: Vec<&String> = v["outputs"]
                    .as_object()
                    .map(|o| o.keys().collect())
                    .unwrap_or_default();
                println!("output channels: {keys:?}");
            });
        }
    }
    Ok(())
}

fn run_model(cli: &Cli, cmd: &ModelCommand) -> Result<()> {
    let engine = open_engine(cli)?;
    match cmd {
        ModelCommand::Train(args) => {
            let spec: TrainerSpec = match &args.spec {
                Some(path) => serde_json::from_slice(
                    &std::fs::read(path).with_context(|| format!("cannot open {}", path.display()))?,
                )
                .context("trainer spec JSON")?,
                None => TrainerSpec::new(aixel_core::train::Learner::RegularizedLogistic),
            };
            let metric = MetricKind::parse(&args.metric)
                .ok_or_else(|| anyhow!("unknown metric `{}`", args.metric))?;
            let (model, snapshot) = engine.train(
                &args.dataset,
                &args.workingset,
                &args.target,
                &spec,
                &args.objective,
                metric,
                &args.branch,
            )?;
            emit(
                cli.json,
                serde_json::json!({
                    "version": snapshot.version,
                    "branch": args.branch,
                    "eval": model.eval,
                    "capped": model.capped,
                }),
                |v| {
                    println!("trained -> snapshot {}", v["version"].as_str().unwrap_or("?"));
                    for (k, val) in v["eval"].as_object().cloned().unwrap_or_default() {
                        println!("  {k}: {val}");
                    }
                },
            );
        }
        ModelCommand::Commit(args) => {
            let kind = ArtifactKind::parse(&args.kind)
                .ok_or_else(|| anyhow!("unknown artifact kind `{}`", args.kind))?;
            let bytes = std::fs::read(&args.file)
                .with_context(|| format!("cannot open {}", args.file.display()))?;
            let mut changes = BTreeMap::new();
            changes.insert((kind, args.name.clone()), bytes);
            let snapshot = engine.model_commit(&args.branch, changes, &args.message)?;
            emit(
                cli.json,
                serde_json::json!({ "version": snapshot.version, "branch": args.branch }),
                |v| println!("committed -> {}", v["version"].as_str().unwrap_or("?")),
            );
        }
        ModelCommand::Branch(args) => {
            engine.model_branch(&args.from, &args.name)?;
            emit(
                cli.json,
                serde_json::json!({ "branch": args.name, "at": args.from }),
                |v| println!("branch `{}` created at {}", v["branch"].as_str().unwrap(), v["at"]),
            );
        }
        ModelCommand::Merge(args) => {
            let policy = MergePolicy::parse(&args.policy)
                .ok_or_else(|| anyhow!("unknown merge policy `{}`", args.policy))?;
            let (snapshot, conflicts) = engine.model_merge(&args.ours, &args.theirs, policy)?;
            emit(
                cli.json,
                serde_json::json!({
                    "version": snapshot.version,
                    "conflicts": conflicts,
                }),
                |v| {
                    println!("merged -> {}", v["version"].as_str().unwrap_or("?"));
                    for c in v["conflicts"].as_array().unwrap_or(&Vec::new()) {
                        println!(
                            "  conflict {}: chose side {} ({})",
                            c["key"], c["chosen"], c["policy"]
                        );
                    }
                },
            );
        }
        ModelCommand::Log(args) => {
            let log = engine.model_log(&args.branch)?;
            emit(
                cli.json,
                serde_json::json!(log
                    .iter()
                    .map(|s| serde_json::json!({
                        "version": s.version,
                        "parents": s.parents,
                        "lineage": s.meta.lineage,
                        "created_ms": s.meta.created_ms,
                        "artifacts": s.manifest.keys().collect::<Vec<_>>(),
                    }))
                    .collect::<Vec<_>>()),
                |v| {
                    for s in v.as_array().unwrap_or(&Vec::new()) {
                        let version = s["version"].as_str().unwrap_or("?");
                        let short = &version[..12.min(version.len())];
                        println!("{short}  {}", s["lineage"].as_str().unwrap_or(""));
                    }
                },
            );
        }
        ModelCommand::Resolve(args) => {
            let descriptor = catalog::read_schema(
                std::fs::File::open(&args.schema)
                    .with_context(|| format!("cannot open {}", args.schema.display()))?,
            )
            .map_err(EngineError::from)?;
            let fit = TaskFit {
                objective: args.objective.clone(),
                metric: args.metric.clone(),
                fields: descriptor
                    .schema
                    .iter()
                    .map(|f| (f.name.clone(), f.kind.name().to_string()))
                    .collect(),
            };
            let snapshot = engine.model_resolve(&fit)?;
            emit(
                cli.json,
                serde_json::json!({
                    "version": snapshot.version,
                    "lineage": snapshot.meta.lineage,
                    "artifacts": snapshot.manifest.keys().collect::<Vec<_>>(),
                }),
                |v| println!("resolved -> {}", v["version"].as_str().unwrap_or("?")),
            );
        }
    }
    Ok(())
}

fn run_drift(cli: &Cli, cmd: &DriftCommand) -> Result<()> {
    let engine = open_engine(cli)?;
    match cmd {
        DriftCommand::Register(args) => {
            let spec: MonitoringSpec = serde_json::from_slice(
                &std::fs::read(&args.spec)
                    .with_context(|| format!("cannot open {}", args.spec.display()))?,
            )
            .context("monitoring spec JSON")?;
            let version = spec.model_version.clone();
            engine.drift_register(spec)?;
            emit(
                cli.json,
                serde_json::json!({ "registered": version }),
                |v| println!("monitoring {}", v["registered"].as_str().unwrap_or("?")),
            );
        }
        DriftCommand::Observe(args) => {
            let body = std::fs::read_to_string(&args.file)
                .with_context(|| format!("cannot open {}", args.file.display()))?;
            let mut batch = Vec::new();
            for line in body.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                batch.push(serde_json::from_str(line).context("observation JSON line")?);
            }
            let (score, events) = engine.drift_observe(&args.model, &batch)?;
            emit(
                cli.json,
                serde_json::json!({
                    "model": args.model,
                    "observations": batch.len(),
                    "score": score,
                    "events": events.iter().map(|(e, a)| serde_json::json!({
                        "event": e,
                        "suggestion": a,
                    })).collect::<Vec<_>>(),
                }),
                |v| {
                    println!(
                        "observed {} -> drift score {:.3}",
                        v["observations"], v["score"].as_f64().unwrap_or_default()
                    );
                    for e in v["events"].as_array().unwrap_or(&Vec::new()) {
                        println!(
                            "  EVENT score {:.3} suggestion {}",
                            e["event"]["score"].as_f64().unwrap_or_default(),
                            e["suggestion"]
                        );
                    }
                },
            );
        }
        DriftCommand::Watch(args) => {
            let path = engine.drift_events_path();
            let print_events = |from: usize| -> Result<usize> {
                let events = engine.read_drift_events()?;
                for event in events.iter().skip(from).filter(|e| e.model_version == args.model) {
                    if cli.json {
                        println!("{}", serde_json::to_string(event)?);
                    } else {
                        let slices: Vec<&str> =
                            event.slices.iter().map(|s| s.slice.as_str()).collect();
                        println!(
                            "[{}] score {:.3} slices {:?} evidence {} sample(s)",
                            event.at_ms,
                            event.score,
                            slices,
                            event.evidence.len()
                        );
                    }
                }
                Ok(events.len())
            };
            let mut seen = print_events(0)?;
            if args.follow {
                loop {
                    std::thread::sleep(std::time::Duration::from_millis(500));
                    if path.exists() {
                        seen = print_events(seen)?;
                    }
                }
            }
        }
    }
    Ok(())
}
