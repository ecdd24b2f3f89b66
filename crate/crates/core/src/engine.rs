//! File-backed engine wiring every module over one data directory.
//!
//! Layout under the data dir: `datasets/<id>/{schema.json,records.ndjson}`,
//! `indexes/<dataset>/<tenant-hex>_<bucket>.afi`, `selections/<id>.json`,
//! `features/<view>.json`, `store/` (the model store), `drift/` (specs and
//! replayable observation logs), `drift_events.jsonl` and `telemetry/`.
//! Everything a CLI invocation builds is reloadable by the next one.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use crate::catalog::{
    self, Catalog, CatalogError, DatasetDescriptor, FieldKind, IngestReport, Record,
    Value,
};
use crate::config::{ConfigError, EngineConfig};
use crate::drift::{
    self, DriftAction, DriftError, DriftEvent, MonitorRegistry, MonitoringSpec, Observation,
};
use crate::feature::{
    self, build_view, FeatureError, FeatureManifest, FeatureView, InteractionCandidate,
};
use crate::gateway::{backend_from_config, Gateway, GatewayBudget, GatewayError};
use crate::index::{
    FusionIndex, IndexError, IndexNode, IndexParams, PartitionKey, PartitionedIndex,
};
use crate::search::{
    self, Candidate, Filter, RankWeights, SearchError, SearchOutcome,
};
use crate::select::{self, SelectError, SelectionSpec, WorkingSet};
use crate::store::{
    ArtifactKind, ConflictRecord, MergePolicy, ModelStore, Snapshot, SnapshotMeta, StoreError,
    TaskFit,
};
use crate::task::{
    self, bind, execute, optimize_dag, standard_registry, synthesize, BoundStep,
    DeclarativeRequest, ExecEnv, ExecReport, PlanDag, Registry, RewriteEntry, RuntimeConfig,
    TaskError, TaskSpec, TelemetryStore,
};
use crate::train::{self, MetricKind, TrainError, TrainedModel, TrainerSpec};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Format(#[from] catalog::FormatError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    User(String),
    #[error("encoding: {0}")]
    Json(String),
}

impl EngineError {
    /// User-facing errors exit 1 with a named cause; the rest are
    /// internal (exit 2).
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            EngineError::Io(_) | EngineError::Json(_) | EngineError::Store(StoreError::Corruption(_))
        )
    }
}

pub struct Engine {
    config: EngineConfig,
    pub catalog: Arc<Catalog>,
    pub store: Arc<ModelStore>,
    pub gateway: Arc<Gateway>,
    pub registry: Registry,
    pub telemetry: Arc<TelemetryStore>,
    indexes: Arc<RwLock<BTreeMap<String, PartitionedIndex>>>,
    monitors: Mutex<MonitorRegistry>,
    plan_cache: Arc<Mutex<std::collections::HashMap<u64, BTreeMap<String, task::DataBatch>>>>,
    batch_overrides: Arc<Mutex<BTreeMap<String, usize>>>,
}

impl Engine {
    pub fn open(config: EngineConfig) -> Result<Engine, EngineError> {
        config.validate()?;
        let root = &config.data_dir;
        fs::create_dir_all(root)?;
        for sub in ["datasets", "indexes", "selections", "features", "drift", "telemetry"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let catalog = Arc::new(Catalog::new());
        let store = Arc::new(ModelStore::open(root.join("store"))?);
        let backend = backend_from_config(&config.gateway.backend, config.seed)?;
        let gateway = Arc::new(Gateway::new(
            backend,
            GatewayBudget::new(config.gateway.max_calls, config.gateway.max_tokens),
        ));
        let telemetry = Arc::new(TelemetryStore::at(root.join("telemetry")).map_err(EngineError::Io)?);

        let engine = Engine {
            catalog,
            store,
            gateway,
            registry: standard_registry(),
            telemetry,
            indexes: Arc::new(RwLock::new(BTreeMap::new())),
            monitors: Mutex::new(MonitorRegistry::new()),
            plan_cache: Arc::new(Mutex::new(std::collections::HashMap::new())),
            batch_overrides: Arc::new(Mutex::new(BTreeMap::new())),
            config,
        };
        engine.load_datasets()?;
        engine.load_indexes()?;
        engine.load_monitors()?;
        Ok(engine)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    fn dataset_dir(&self, dataset_id: &str) -> PathBuf {
        self.config.data_dir.join("datasets").join(dataset_id)
    }

    fn load_datasets(&self) -> Result<(), EngineError> {
        let dir = self.config.data_dir.join("datasets");
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if !path.is_dir() {
                continue;
            }
            let schema_path = path.join("schema.json");
            if !schema_path.exists() {
                continue;
            }
            let descriptor = catalog::read_schema(fs::File::open(&schema_path)?)?;
            let handle = self.catalog.register_dataset(DatasetDescriptor {
                row_count: 0,
                ..descriptor
            })?;
            let records_path = path.join("records.ndjson");
            if records_path.exists() {
                let descriptor = handle.read().unwrap().descriptor().clone();
                let records = catalog::read_records(
                    std::io::BufReader::new(fs::File::open(&records_path)?),
                    &descriptor,
                )?;
                handle.write().unwrap().ingest(records);
            }
        }
        Ok(())
    }

    /// Registers a dataset from a schema document and persists it.
    pub fn register_dataset(&self, descriptor: DatasetDescriptor) -> Result<(), EngineError> {
        let id = descriptor.dataset_id.clone();
        self.catalog.register_dataset(descriptor.clone())?;
        let dir = self.dataset_dir(&id);
        fs::create_dir_all(&dir)?;
        catalog::write_schema(fs::File::create(dir.join("schema.json"))?, &descriptor)?;
        Ok(())
    }

    /// Ingests records into a dataset, appending accepted rows to the
    /// dataset's NDJSON log.
    pub fn ingest(&self, dataset_id: &str, records: Vec<Record>) -> Result<IngestReport, EngineError> {
        let handle = self.catalog.dataset(dataset_id)?;
        let mut ds = handle.write().unwrap();
        let report = ds.ingest(records);
        let accepted: Vec<Record> = report
            .accepted_ids
            .iter()
            .filter_map(|id| ds.record(id).cloned())
            .collect();
        let dir = self.dataset_dir(dataset_id);
        fs::create_dir_all(&dir)?;
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("records.ndjson"))?;
        catalog::write_records(file, &accepted)?;
        Ok(report)
    }

    fn index_dir(&self, dataset_id: &str) -> PathBuf {
        self.config.data_dir.join("indexes").join(dataset_id)
    }

    fn load_indexes(&self) -> Result<(), EngineError> {
        let dir = self.config.data_dir.join("indexes");
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if !path.is_dir() {
                continue;
            }
            let dataset_id = path
                .file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_default();
            let mut parts = PartitionedIndex::new();
            for file in fs::read_dir(&path)? {
                let file = file?.path();
                if file.extension().and_then(|e| e.to_str()) != Some("afi") {
                    continue;
                }
                let bytes = fs::read(&file)?;
                let index = FusionIndex::deserialize(&bytes)?;
                let key = index.params().partition.clone();
                parts.insert_partition(key, index);
            }
            if parts.partition_count() > 0 {
                self.indexes.write().unwrap().insert(dataset_id, parts);
            }
        }
        Ok(())
    }

    fn persist_index(&self, dataset_id: &str, parts: &PartitionedIndex) -> Result<(), EngineError> {
        let dir = self.index_dir(dataset_id);
        fs::create_dir_all(&dir)?;
        for (key, index) in parts.partitions() {
            let name = format!("{}_{}.afi", hex::encode(&key.tenant), key.bucket);
            fs::write(dir.join(name), index.serialize())?;
        }
        Ok(())
    }

    /// Builds (or rebuilds) the fusion index for a dataset from its vector
    /// field, one numeric attribute and an optional label-set field. One
    /// graph per (tenant, time bucket) partition; `partition_time` turns
    /// bucketing on.
    pub fn build_index(
        &self,
        dataset_id: &str,
        attr_field: &str,
        label_field: Option<&str>,
        partition_time: bool,
    ) -> Result<Vec<(PartitionKey, crate::index::BuildReport)>, EngineError> {
        let handle = self.catalog.dataset(dataset_id)?;
        let ds = handle.read().unwrap();
        let descriptor = ds.descriptor();
        let vector_field = descriptor
            .vector_field()
            .ok_or_else(|| EngineError::User(format!("dataset `{dataset_id}` has no vector field")))?
            .name
            .clone();
        match descriptor.field(attr_field) {
            Some(def) if def.kind == FieldKind::Numeric => {}
            Some(def) => {
                return Err(EngineError::Catalog(CatalogError::KindMismatch {
                    field: attr_field.into(),
                    expected: "numeric".into(),
                    actual: def.kind.name().into(),
                }))
            }
            None => {
                return Err(EngineError::Catalog(CatalogError::UnknownField(
                    attr_field.into(),
                )))
            }
        }
        let granularity = partition_time.then(|| descriptor.partition.granularity);

        let params = IndexParams {
            metric: self.config.index.metric,
            max_degree: self.config.index.max_degree,
            ef_construction: self.config.index.ef_construction,
            seed: self.config.seed,
            ..IndexParams::default()
        };
        let mut parts = PartitionedIndex::new();
        for record in ds.live_records() {
            let Some(embedding) = record.values.get(&vector_field).and_then(Value::as_vector)
            else {
                continue; // records without a vector stay out of the index
            };
            let Some(attr) = record.values.get(attr_field).and_then(Value::as_number) else {
                continue;
            };
            let labels: Vec<String> = label_field
                .and_then(|f| record.values.get(f))
                .and_then(Value::as_labels)
                .map(|l| l.to_vec())
                .unwrap_or_default();
            let key =
                PartitionedIndex::partition_key_for(&record.tenant, record.timestamp, granularity);
            parts.insert(
                &params,
                key,
                IndexNode::new(record.record_id.clone(), embedding.to_vec(), attr)
                    .with_labels(labels),
            )?;
        }
        let reports: Vec<(PartitionKey, crate::index::BuildReport)> = parts
            .partitions()
            .map(|(k, idx)| (k.clone(), idx.report()))
            .collect();
        self.persist_index(dataset_id, &parts)?;
        self.indexes
            .write()
            .unwrap()
            .insert(dataset_id.to_string(), parts);
        Ok(reports)
    }

    pub fn has_index(&self, dataset_id: &str) -> bool {
        self.indexes.read().unwrap().contains_key(dataset_id)
    }

    /// Constraint-aware search over the dataset's fusion index.
    pub fn search(
        &self,
        dataset_id: &str,
        query: &[f32],
        k: usize,
        filters: &[Filter],
        weights: Option<RankWeights>,
        ef_search: Option<usize>,
    ) -> Result<SearchOutcome, EngineError> {
        let indexes = self.indexes.read().unwrap();
        let parts = indexes
            .get(dataset_id)
            .ok_or_else(|| EngineError::User(format!("no index built for `{dataset_id}`")))?;
        let profile = search::derive_profile(filters);
        let weights = weights.unwrap_or(self.config.search.weights);
        let ef = ef_search.unwrap_or(self.config.index.ef_search);
        Ok(search::search_partitioned(parts, query, k, &profile, &weights, ef)?)
    }

    /// Exact constrained top-k by scan: the oracle route.
    pub fn search_exact(
        &self,
        dataset_id: &str,
        query: &[f32],
        k: usize,
        filters: &[Filter],
        weights: Option<RankWeights>,
    ) -> Result<Vec<Candidate>, EngineError> {
        let indexes = self.indexes.read().unwrap();
        let parts = indexes
            .get(dataset_id)
            .ok_or_else(|| EngineError::User(format!("no index built for `{dataset_id}`")))?;
        let profile = search::derive_profile(filters);
        let weights = weights.unwrap_or(self.config.search.weights);
        let mut all = Vec::new();
        for (_, index) in parts.partitions() {
            all.extend(search::brute_force(index, query, k, &profile, &weights)?);
        }
        all.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.node_id.cmp(&b.node_id))
        });
        all.truncate(k);
        Ok(all)
    }

    /// Task-aligned selection, persisted as a manifest.
    pub fn select(&self, dataset_id: &str, spec: &SelectionSpec) -> Result<WorkingSet, EngineError> {
        let handle = self.catalog.dataset(dataset_id)?;
        let ds = handle.read().unwrap();
        let ws = select::select(&ds, spec)?;
        self.persist_working_set(&ws)?;
        Ok(ws)
    }

    pub fn refresh_selection(
        &self,
        dataset_id: &str,
        manifest_id: &str,
        delta: &[Record],
        spec: &SelectionSpec,
    ) -> Result<WorkingSet, EngineError> {
        let ws = self.load_working_set(manifest_id)?;
        let handle = self.catalog.dataset(dataset_id)?;
        let ds = handle.read().unwrap();
        let refreshed = select::refresh(&ws, &ds, delta, spec)?;
        self.persist_working_set(&refreshed)?;
        Ok(refreshed)
    }

    fn persist_working_set(&self, ws: &WorkingSet) -> Result<(), EngineError> {
        let path = self
            .config
            .data_dir
            .join("selections")
            .join(format!("{}.json", ws.manifest_id));
        fs::write(
            path,
            serde_json::to_vec_pretty(ws).map_err(|e| EngineError::Json(e.to_string()))?,
        )?;
        Ok(())
    }

    pub fn load_working_set(&self, manifest_id: &str) -> Result<WorkingSet, EngineError> {
        let path = self
            .config
            .data_dir
            .join("selections")
            .join(format!("{manifest_id}.json"));
        if !path.exists() {
            return Err(EngineError::User(format!(
                "selection manifest `{manifest_id}` not found"
            )));
        }
        serde_json::from_slice(&fs::read(path)?).map_err(|e| EngineError::Json(e.to_string()))
    }

    /// Builds a feature view over a working set and runs selection,
    /// interaction mining and retention; the manifest persists.
    pub fn build_features(
        &self,
        dataset_id: &str,
        manifest_id: &str,
        target: &str,
        budget: usize,
        interaction_q: usize,
        metric: MetricKind,
    ) -> Result<FeatureManifest, EngineError> {
        let ws = self.load_working_set(manifest_id)?;
        let handle = self.catalog.dataset(dataset_id)?;
        let ds = handle.read().unwrap();
        let view = build_view(&ds, &ws, target)?;
        let selected = feature::select_view_features(
            &view,
            budget,
            feature::DEFAULT_BINS,
            feature::DEFAULT_GAIN_EPSILON,
        )?;
        let interactions = self.mine_interactions(&view, interaction_q, metric)?;
        let manifest = FeatureManifest::from_view(&view, selected, interactions, None);
        let path = self
            .config
            .data_dir
            .join("features")
            .join(format!("{}.json", manifest.view_id));
        fs::write(
            path,
            serde_json::to_vec_pretty(&manifest).map_err(|e| EngineError::Json(e.to_string()))?,
        )?;
        Ok(manifest)
    }

    fn mine_interactions(
        &self,
        view: &FeatureView,
        q: usize,
        metric: MetricKind,
    ) -> Result<Vec<InteractionCandidate>, EngineError> {
        if q == 0 {
            return Ok(Vec::new());
        }
        // Lightweight linear baseline over the train segment feeds the
        // residual signal.
        let train_rows = view.segment_rows(crate::select::Segment::Train);
        if train_rows.len() < 8 {
            return Ok(Vec::new());
        }
        let names = view.feature_names();
        let x = view.matrix(&names, &train_rows)?;
        let target_col = view
            .column(&view.target)
            .ok_or_else(|| FeatureError::UnknownColumn(view.target.clone()))?;
        let y_all = target_col.data.as_f64();
        let y: Vec<f64> = train_rows.iter().map(|&r| y_all[r]).collect();
        let logistic = matches!(metric, MetricKind::Accuracy | MetricKind::Auc);
        let (baseline, _) =
            train::linear::fit(&x, &y, train::linear::FitOptions::baseline(logistic), None);
        let predictions = baseline.predict_rows(&x);
        let candidates = feature::propose_interactions(view, &predictions, q)?;
        Ok(feature::retain_interactions(
            candidates,
            view,
            metric,
            2,
            feature::interact::RETENTION_DELTA,
        )?)
    }

    /// Rebuilds the materialized view for a persisted working set.
    pub fn view_for(
        &self,
        dataset_id: &str,
        manifest_id: &str,
        target: &str,
    ) -> Result<FeatureView, EngineError> {
        let ws = self.load_working_set(manifest_id)?;
        let handle = self.catalog.dataset(dataset_id)?;
        let ds = handle.read().unwrap();
        Ok(build_view(&ds, &ws, target)?)
    }

    /// Trains on a working set's view and commits the snapshot.
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        &self,
        dataset_id: &str,
        manifest_id: &str,
        target: &str,
        spec: &TrainerSpec,
        objective: &str,
        metric: MetricKind,
        branch: &str,
    ) -> Result<(TrainedModel, Snapshot), EngineError> {
        let view = self.view_for(dataset_id, manifest_id, target)?;
        Ok(train::train(
            &view,
            spec,
            objective,
            metric,
            &self.store,
            branch,
            now_ms(),
        )?)
    }

    pub fn model_commit(
        &self,
        branch: &str,
        changes: BTreeMap<(ArtifactKind, String), Vec<u8>>,
        lineage: &str,
    ) -> Result<Snapshot, EngineError> {
        let head = self.store.branch_head(branch)?;
        let parent = self.store.load_snapshot(&head)?;
        let meta = SnapshotMeta {
            lineage: lineage.to_string(),
            created_ms: now_ms(),
            compat: parent.meta.compat.clone(),
        };
        Ok(self.store.commit(branch, changes, meta, None)?)
    }

    pub fn model_branch(&self, from_version: &str, name: &str) -> Result<(), EngineError> {
        Ok(self.store.create_branch(from_version, name)?)
    }

    pub fn model_merge(
        &self,
        a: &str,
        b: &str,
        policy: MergePolicy,
    ) -> Result<(Snapshot, Vec<ConflictRecord>), EngineError> {
        Ok(self.store.merge(a, b, policy)?)
    }

    pub fn model_log(&self, branch: &str) -> Result<Vec<Snapshot>, EngineError> {
        let head = self.store.branch_head(branch)?;
        Ok(self.store.log(&head)?)
    }

    pub fn model_resolve(&self, fit: &TaskFit) -> Result<Snapshot, EngineError> {
        Ok(self.store.resolve(fit)?)
    }

    fn drift_dir(&self) -> PathBuf {
        self.config.data_dir.join("drift")
    }

    pub fn drift_events_path(&self) -> PathBuf {
        self.config.data_dir.join("drift_events.jsonl")
    }

    fn load_monitors(&self) -> Result<(), EngineError> {
        let dir = self.drift_dir();
        let mut monitors = self.monitors.lock().unwrap();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json")
                || !path
                    .file_name()
                    .map(|n| n.to_string_lossy().ends_with(".spec.json"))
                    .unwrap_or(false)
            {
                continue;
            }
            let spec: MonitoringSpec = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| EngineError::Json(e.to_string()))?;
            let version = spec.model_version.clone();
            let monitor = monitors.register(spec)?;
            // Replay persisted observations to rebuild window state.
            let obs_path = self.drift_dir().join(format!("{version}.obs.jsonl"));
            if obs_path.exists() {
                for line in fs::read_to_string(&obs_path)?.lines() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let obs: Observation = serde_json::from_str(line)
                        .map_err(|e| EngineError::Json(e.to_string()))?;
                    monitor.observe(&[obs]);
                }
                while monitor.poll().is_some() {} // replay events already logged
            }
        }
        Ok(())
    }

    pub fn drift_register(&self, spec: MonitoringSpec) -> Result<(), EngineError> {
        let version = spec.model_version.clone();
        let mut monitors = self.monitors.lock().unwrap();
        monitors.register(spec.clone())?;
        fs::write(
            self.drift_dir().join(format!("{version}.spec.json")),
            serde_json::to_vec_pretty(&spec).map_err(|e| EngineError::Json(e.to_string()))?,
        )?;
        Ok(())
    }

    /// Feeds observations, persists them for replay, logs any events and
    /// returns (aggregate score, emitted events with suggestions).
    pub fn drift_observe(
        &self,
        model_version: &str,
        batch: &[Observation],
    ) -> Result<(f64, Vec<(DriftEvent, DriftAction)>), EngineError> {
        let mut monitors = self.monitors.lock().unwrap();
        let monitor = monitors.get_mut(model_version)?;
        let score = monitor.observe(batch);
        let mut events = Vec::new();
        while let Some((event, action)) = monitor.poll() {
            drift::append_event(&self.drift_events_path(), &event)?;
            events.push((event, action));
        }
        // Persist for state replay on reopen.
        use std::io::Write;
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.drift_dir().join(format!("{model_version}.obs.jsonl")))?;
        for obs in batch {
            writeln!(
                file,
                "{}",
                serde_json::to_string(obs).map_err(|e| EngineError::Json(e.to_string()))?
            )?;
        }
        Ok((score, events))
    }

    pub fn drift_score(&self, model_version: &str) -> Result<f64, EngineError> {
        let monitors = self.monitors.lock().unwrap();
        Ok(monitors.get(model_version)?.aggregate_score())
    }

    pub fn read_drift_events(&self) -> Result<Vec<DriftEvent>, EngineError> {
        Ok(drift::read_events(&self.drift_events_path())?)
    }

    fn exec_env(&self) -> ExecEnv {
        ExecEnv {
            catalog: self.catalog.clone(),
            indexes: self.indexes.clone(),
            store: Some(self.store.clone()),
            gateway: self.gateway.clone(),
            plan_cache: self.plan_cache.clone(),
            batch_overrides: self.batch_overrides.clone(),
        }
    }

    /// The full declarative path: parse, bind, synthesize, optimize,
    /// execute. Returns every intermediate artifact for explanations.
    pub fn task_run(&self, request: &DeclarativeRequest) -> Result<TaskRunOutcome, EngineError> {
        let spec = task::parse(request, &self.catalog, &self.gateway)?;
        let index_available = self.has_index(&spec.dataset);
        let bound = bind(
            &spec,
            &self.registry,
            &self.catalog,
            &self.telemetry,
            index_available,
        )?;
        let plan = synthesize(&spec, &bound, &self.registry, self.config.workers)?;
        let (optimized, rewrite_log) =
            optimize_dag(&plan, &self.registry, self.config.gateway.context_budget)?;
        let runtime = RuntimeConfig {
            workers: self.config.workers,
            latency_budget_ms: spec.budgets.latency_ms,
        };
        let report = execute(&optimized, &self.exec_env(), &self.registry, &runtime)?;
        task::exec::persist_telemetry(&self.telemetry, &report.telemetry);
        Ok(TaskRunOutcome {
            spec,
            bound,
            plan,
            optimized,
            rewrite_log,
            report,
        })
    }
}

pub struct TaskRunOutcome {
    pub spec: TaskSpec,
    pub bound: Vec<BoundStep>,
    pub plan: PlanDag,
    pub optimized: PlanDag,
    pub rewrite_log: Vec<RewriteEntry>,
    pub report: ExecReport,
}

fn now_ms() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// Parses a `field:lo..hi` range flag into filters.
pub fn parse_range_flag(raw: &str) -> Result<(String, Vec<Filter>), EngineError> {
    let (field, range) = raw
        .split_once(':')
        .ok_or_else(|| EngineError::User(format!("range `{raw}` must look like field:lo..hi")))?;
    let (lo, hi) = range
        .split_once("..")
        .ok_or_else(|| EngineError::User(format!("range `{raw}` must look like field:lo..hi")))?;
    let mut filters = Vec::new();
    if !lo.is_empty() {
        let value: f64 = lo
            .parse()
            .map_err(|_| EngineError::User(format!("bad range bound `{lo}`")))?;
        filters.push(Filter::AttrAtLeast { value });
    }
    if !hi.is_empty() {
        let value: f64 = hi
            .parse()
            .map_err(|_| EngineError::User(format!("bad range bound `{hi}`")))?;
        filters.push(Filter::AttrAtMost { value });
    }
    Ok((field.to_string(), filters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::FieldDef;

    fn test_engine() -> (tempfile::TempDir, Engine) {
        let dir = tempfile::tempdir().unwrap();
        let config = EngineConfig {
            data_dir: dir.path().to_path_buf(),
            workers: 2,
            ..Default::default()
        };
        let engine = Engine::open(config).unwrap();
        (dir, engine)
    }

    fn demo_schema() -> DatasetDescriptor {
        DatasetDescriptor::new(
            "events",
            vec![
                FieldDef {
                    name: "y".into(),
                    kind: FieldKind::Numeric,
                },
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
        )
    }

    fn demo_records(n: usize) -> Vec<Record> {
        (0..n)
            .map(|i| {
                let angle = i as f32 * 0.37;
                let v = vec![angle.cos(), angle.sin(), (angle * 0.5).cos(), (angle * 0.5).sin()];
                Record::new(format!("r{i:04}"))
                    .at(1_000 + i as i64)
                    .with("y", Value::Number((i % 2) as f64))
                    .with("price", Value::Number((i % 100) as f64))
                    .with("emb", Value::Vector(v))
                    .with(
                        "tags",
                        Value::Labels(if i % 3 == 0 {
                            vec!["hot".into()]
                        } else {
                            vec!["cold".into()]
                        }),
                    )
            })
            .collect()
    }

    #[test]
    fn end_to_end_state_survives_reopen() {
        let (dir, engine) = test_engine();
        engine.register_dataset(demo_schema()).unwrap();
        let report = engine.ingest("events", demo_records(200)).unwrap();
        assert_eq!(report.accepted, 200);
        engine.build_index("events", "price", Some("tags"), false).unwrap();
        let ws = engine
            .select("events", &SelectionSpec::new("y", "accuracy", 100))
            .unwrap();

        // Reopen from disk and confirm everything is queryable.
        drop(engine);
        let config = EngineConfig {
            data_dir: dir.path().to_path_buf(),
            workers: 2,
            ..Default::default()
        };
        let engine = Engine::open(config).unwrap();
        assert!(engine.catalog.contains("events"));
        assert!(engine.has_index("events"));
        let loaded = engine.load_working_set(&ws.manifest_id).unwrap();
        assert_eq!(loaded.members.len(), ws.members.len());

        let q = vec![1.0f32, 0.0, 1.0, 0.0];
        let out = engine
            .search(
                "events",
                &q,
                5,
                &[Filter::AttrBetween { lo: 10.0, hi: 60.0 }],
                None,
                None,
            )
            .unwrap();
        assert!(!out.candidates.is_empty());
        // Soundness against the exact route.
        let exact = engine
            .search_exact("events", &q, 5, &[Filter::AttrBetween { lo: 10.0, hi: 60.0 }], None)
            .unwrap();
        assert_eq!(out.candidates.len(), exact.len());
    }

    #[test]
    fn repeated_ingest_appends_and_reloads_exactly() {
        let (dir, engine) = test_engine();
        engine.register_dataset(demo_schema()).unwrap();
        let first = demo_records(50);
        engine.ingest("events", first.clone()).unwrap();
        // Second batch: 50 new plus 10 duplicates of the first batch.
        let mut second = demo_records(120).split_off(50);
        second.extend(first.iter().take(10).cloned());
        let report = engine.ingest("events", second).unwrap();
        assert_eq!(report.accepted, 70);
        assert_eq!(report.rejected.len(), 10);

        drop(engine);
        let engine = Engine::open(EngineConfig {
            data_dir: dir.path().to_path_buf(),
            ..Default::default()
        })
        .unwrap();
        let handle = engine.catalog.dataset("events").unwrap();
        let ds = handle.read().unwrap();
        assert_eq!(ds.row_count(), 120);
        assert!(ds.record("r0049").is_some());
        assert!(ds.record("r0119").is_some());
    }

    #[test]
    fn range_flag_parsing() {
        let (_, filters) = parse_range_flag("price:3..7").unwrap();
        assert_eq!(filters.len(), 2);
        let (_, filters) = parse_range_flag("price:3..").unwrap();
        assert_eq!(filters.len(), 1);
        assert!(parse_range_flag("oops").is_err());
    }
}
