//! Training, calibration refresh and short fine-tuning over feature
//! views, with artifacts committed to the model store: parameters and
//! calibration as Model, the cached feature matrix as Tensor, evals and
//! compatibility as Metadata, resolution keys as Index.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::calibrate::{self, CalibrationMap};
use super::linear::{self, FitOptions, LinearModel};
use super::metrics::MetricKind;
use super::stumps::{self, StumpEnsemble};
use crate::feature::{ColumnKind, FeatureError, FeatureView};
use crate::select::Segment;
use crate::store::{
    artifact_key, ArtifactKind, CompatDescriptor, ModelStore, Snapshot, SnapshotMeta, StoreError,
};

pub const MIN_RECALIBRATION_LABELS: usize = 100;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("target is constant; nothing to learn")]
    DegenerateTarget,
    #[error("train segment is empty")]
    EmptyTrainSegment,
    #[error("insufficient labels: need {needed}, got {got}")]
    InsufficientLabels { needed: usize, got: usize },
    #[error("feature view mismatch: snapshot was trained on view {expected}, got {got}; run a full train")]
    ManifestMismatch { expected: String, got: String },
    #[error("snapshot is missing artifact `{0}`")]
    MissingArtifact(String),
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("encoding: {0}")]
    Json(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Learner {
    RegularizedLinear,
    RegularizedLogistic,
    DecisionStumpEnsemble,
}

impl Learner {
    pub fn all() -> [Learner; 3] {
        [
            Learner::RegularizedLinear,
            Learner::RegularizedLogistic,
            Learner::DecisionStumpEnsemble,
        ]
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Hyper {
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub stump_rounds: usize,
    pub shrinkage: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            learning_rate: 0.5,
            l2: 1e-3,
            epochs: 300,
            stump_rounds: 50,
            shrinkage: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ResourceCaps {
    pub max_seconds: f64,
    pub max_memory_bytes: u64,
}

impl Default for ResourceCaps {
    fn default() -> Self {
        ResourceCaps {
            max_seconds: 60.0,
            max_memory_bytes: 1 << 30,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainerSpec {
    pub learner: Learner,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub caps: ResourceCaps,
}

impl TrainerSpec {
    pub fn new(learner: Learner) -> Self {
        TrainerSpec {
            learner,
            hyper: Hyper::default(),
            seed: 0,
            caps: ResourceCaps::default(),
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.caps.max_seconds <= 0.0 || self.caps.max_memory_bytes == 0 {
            return Err(TrainError::BadSpec("resource caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum LearnerParams {
    Linear(LinearModel),
    Stumps(StumpEnsemble),
}

impl LearnerParams {
    pub fn predict(&self, row: &[f64]) -> f64 {
        match self {
            LearnerParams::Linear(m) => m.predict(row),
            LearnerParams::Stumps(m) => m.predict(row),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainedModel {
    pub learner: Learner,
    pub params: LearnerParams,
    pub calibration: CalibrationMap,
    pub eval: BTreeMap<String, f64>,
    pub view_ref: String,
    pub feature_names: Vec<String>,
    pub seed: u64,
    pub capped: bool,
}

impl TrainedModel {
    pub fn predict_raw(&self, row: &[f64]) -> f64 {
        self.params.predict(row)
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.calibration.apply(self.params.predict(row))
    }

    pub fn params_blob(&self) -> Vec<u8> {
        serde_json::to_vec(&self.params).expect("params serialize")
    }
}

fn target_values(view: &FeatureView, rows: &[usize]) -> Result<Vec<f64>, TrainError> {
    let col = view
        .column(&view.target)
        .ok_or_else(|| FeatureError::UnknownColumn(view.target.clone()))?;
    let all = col.data.as_f64();
    Ok(rows.iter().map(|&r| all[r]).collect())
}

fn fit_params(
    spec: &TrainerSpec,
    x: &[Vec<f64>],
    y: &[f64],
    warm: Option<&LearnerParams>,
    deadline: Option<Instant>,
    epochs_override: Option<usize>,
    lr_scale: f64,
) -> (LearnerParams, bool) {
    match spec.learner {
        Learner::RegularizedLinear | Learner::RegularizedLogistic => {
            let logistic = spec.learner == Learner::RegularizedLogistic;
            let options = FitOptions {
                logistic,
                l2: spec.hyper.l2,
                learning_rate: spec.hyper.learning_rate * lr_scale,
                epochs: epochs_override.unwrap_or(spec.hyper.epochs),
                deadline,
            };
            let warm_linear = warm.and_then(|p| match p {
                LearnerParams::Linear(m) => Some(m),
                _ => None,
            });
            let (model, capped) = linear::fit(x, y, options, warm_linear);
            (LearnerParams::Linear(model), capped)
        }
        Learner::DecisionStumpEnsemble => {
            let rounds = epochs_override.unwrap_or(spec.hyper.stump_rounds);
            let logistic = y.iter().all(|&v| v == 0.0 || v == 1.0);
            let (model, capped) =
                stumps::fit(x, y, rounds, spec.hyper.shrinkage, logistic, deadline);
            (LearnerParams::Stumps(model), capped)
        }
    }
}

fn evaluate(
    params: &LearnerParams,
    calibration: &CalibrationMap,
    x: &[Vec<f64>],
    y: &[f64],
    probabilistic: bool,
) -> BTreeMap<String, f64> {
    let mut eval = BTreeMap::new();
    if x.is_empty() {
        return eval;
    }
    let raw: Vec<f64> = x.iter().map(|r| params.predict(r)).collect();
    let preds: Vec<f64> = raw.iter().map(|&s| calibration.apply(s)).collect();
    eval.insert("rmse".into(), MetricKind::Rmse.compute(&preds, y));
    if probabilistic {
        eval.insert("accuracy".into(), MetricKind::Accuracy.compute(&preds, y));
        eval.insert("auc".into(), MetricKind::Auc.compute(&preds, y));
        eval.insert(
            "ece".into(),
            calibrate::expected_calibration_error(&preds, y),
        );
    }
    eval
}

fn compat_for_view(view: &FeatureView, objective: &str, metric: &str) -> CompatDescriptor {
    let mut required = BTreeMap::new();
    for c in &view.columns {
        let kind = match c.kind {
            ColumnKind::Numeric => "numeric",
            ColumnKind::Categorical => "categorical",
        };
        required.insert(c.name.clone(), kind.to_string());
    }
    CompatDescriptor {
        required_fields: required,
        objective: objective.to_string(),
        metric: metric.to_string(),
    }
}

fn matrix_blob(x: &[Vec<f64>]) -> Vec<u8> {
    let rows = x.len() as u64;
    let cols = x.first().map(Vec::len).unwrap_or(0) as u64;
    let mut out = Vec::with_capacity(16 + (rows * cols) as usize * 8);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for row in x {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Trains on the view's train segment, evaluates on the validation
/// segment only, and commits the four artifact classes as one snapshot.
pub fn train(
    view: &FeatureView,
    spec: &TrainerSpec,
    objective: &str,
    metric: MetricKind,
    store: &ModelStore,
    branch: &str,
    created_ms: i64,
) -> Result<(TrainedModel, Snapshot), TrainError> {
    spec.validate()?;
    let train_rows = view.segment_rows(Segment::Train);
    if train_rows.is_empty() {
        return Err(TrainError::EmptyTrainSegment);
    }
    let feature_names = view.feature_names();
    let x_train = view.matrix(&feature_names, &train_rows)?;
    let y_train = target_values(view, &train_rows)?;
    let first = y_train[0];
    if y_train.iter().all(|&v| v == first) {
        return Err(TrainError::DegenerateTarget);
    }

    let deadline = Instant::now() + Duration::from_secs_f64(spec.caps.max_seconds);
    let (params, capped) = fit_params(spec, &x_train, &y_train, None, Some(deadline), None, 1.0);

    let val_rows = view.segment_rows(Segment::Val);
    let x_val = view.matrix(&feature_names, &val_rows)?;
    let y_val = target_values(view, &val_rows)?;

    let probabilistic = matches!(spec.learner, Learner::RegularizedLogistic)
        || y_train.iter().all(|&v| v == 0.0 || v == 1.0);
    // Calibration fitted on validation scores when the output is a
    // probability; identity otherwise.
    let calibration = if probabilistic && x_val.len() >= 10 {
        let val_scores: Vec<f64> = x_val.iter().map(|r| params.predict(r)).collect();
        calibrate::fit(&val_scores, &y_val)
    } else {
        CalibrationMap::identity()
    };

    let eval = evaluate(&params, &calibration, &x_val, &y_val, probabilistic);
    let model = TrainedModel {
        learner: spec.learner,
        params,
        calibration,
        eval: eval.clone(),
        view_ref: view.id.clone(),
        feature_names: feature_names.clone(),
        seed: spec.seed,
        capped,
    };

    let snapshot = commit_model(&model, view, objective, metric, store, branch, created_ms, None)?;
    Ok((model, snapshot))
}

#[allow(clippy::too_many_arguments)]
fn commit_model(
    model: &TrainedModel,
    view: &FeatureView,
    objective: &str,
    metric: MetricKind,
    store: &ModelStore,
    branch: &str,
    created_ms: i64,
    lineage: Option<String>,
) -> Result<Snapshot, TrainError> {
    let metadata = serde_json::json!({
        "metrics": model.eval,
        "learner": model.learner,
        "view": view.id,
        "working_set": view.working_set,
        "seed": model.seed,
        "capped": model.capped,
        "features": model.feature_names,
        "target": view.target,
    });
    let resolution = serde_json::json!({
        "objective": objective,
        "metric": metric.name(),
        "view": view.id,
        "working_set": view.working_set,
    });
    let feature_rows = view.segment_rows(Segment::Train);
    let x = view.matrix(&model.feature_names, &feature_rows)?;

    let mut changes: BTreeMap<(ArtifactKind, String), Vec<u8>> = BTreeMap::new();
    changes.insert(
        (ArtifactKind::Model, "parameters".into()),
        model.params_blob(),
    );
    changes.insert(
        (ArtifactKind::Model, "calibration".into()),
        serde_json::to_vec(&model.calibration).map_err(|e| TrainError::Json(e.to_string()))?,
    );
    changes.insert((ArtifactKind::Tensor, "features".into()), matrix_blob(&x));
    changes.insert(
        (ArtifactKind::Metadata, "evals".into()),
        serde_json::to_vec(&metadata).map_err(|e| TrainError::Json(e.to_string()))?,
    );
    changes.insert(
        (ArtifactKind::Index, "resolution".into()),
        serde_json::to_vec(&resolution).map_err(|e| TrainError::Json(e.to_string()))?,
    );

    let meta = SnapshotMeta {
        lineage: lineage.unwrap_or_else(|| {
            format!(
                "train {:?} on view {} (seed {})",
                model.learner,
                &view.id[..12.min(view.id.len())],
                model.seed
            )
        }),
        created_ms,
        compat: compat_for_view(view, objective, metric.name()),
    };
    Ok(store.commit(branch, changes, meta, None)?)
}

/// Loads the trained model back out of a snapshot.
pub fn load_model(store: &ModelStore, snapshot: &Snapshot) -> Result<TrainedModel, TrainError> {
    let params_ref = snapshot
        .artifact(ArtifactKind::Model, "parameters")
        .ok_or_else(|| TrainError::MissingArtifact(artifact_key(ArtifactKind::Model, "parameters")))?;
    let params: LearnerParams = serde_json::from_slice(&store.reconstruct(&params_ref.hash)?)
        .map_err(|e| TrainError::Json(e.to_string()))?;
    let cal_ref = snapshot
        .artifact(ArtifactKind::Model, "calibration")
        .ok_or_else(|| TrainError::MissingArtifact(artifact_key(ArtifactKind::Model, "calibration")))?;
    let calibration: CalibrationMap = serde_json::from_slice(&store.reconstruct(&cal_ref.hash)?)
        .map_err(|e| TrainError::Json(e.to_string()))?;
    let meta_ref = snapshot
        .artifact(ArtifactKind::Metadata, "evals")
        .ok_or_else(|| TrainError::MissingArtifact(artifact_key(ArtifactKind::Metadata, "evals")))?;
    let metadata: serde_json::Value = serde_json::from_slice(&store.reconstruct(&meta_ref.hash)?)
        .map_err(|e| TrainError::Json(e.to_string()))?;
    let learner = serde_json::from_value(metadata["learner"].clone())
        .map_err(|e| TrainError::Json(e.to_string()))?;
    let eval = serde_json::from_value(metadata["metrics"].clone()).unwrap_or_default();
    let feature_names = serde_json::from_value(metadata["features"].clone()).unwrap_or_default();
    Ok(TrainedModel {
        learner,
        params,
        calibration,
        eval,
        view_ref: metadata["view"].as_str().unwrap_or_default().to_string(),
        feature_names,
        seed: metadata["seed"].as_u64().unwrap_or(0),
        capped: metadata["capped"].as_bool().unwrap_or(false),
    })
}

/// Refits the calibration map on a recent labeled window and commits a
/// snapshot whose only change is the calibration artifact. The window ECE
/// never increases: a fit that would do worse keeps the current map.
pub fn recalibrate(
    store: &ModelStore,
    branch: &str,
    window: &[(f64, f64)],
    created_ms: i64,
) -> Result<Snapshot, TrainError> {
    if window.len() < MIN_RECALIBRATION_LABELS {
        return Err(TrainError::InsufficientLabels {
            needed: MIN_RECALIBRATION_LABELS,
            got: window.len(),
        });
    }
    let head = store.branch_head(branch)?;
    let snapshot = store.load_snapshot(&head)?;
    let cal_ref = snapshot
        .artifact(ArtifactKind::Model, "calibration")
        .ok_or_else(|| TrainError::MissingArtifact(artifact_key(ArtifactKind::Model, "calibration")))?;
    let current: CalibrationMap = serde_json::from_slice(&store.reconstruct(&cal_ref.hash)?)
        .map_err(|e| TrainError::Json(e.to_string()))?;

    let scores: Vec<f64> = window.iter().map(|(s, _)| *s).collect();
    let labels: Vec<f64> = window.iter().map(|(_, l)| *l).collect();
    let fitted = calibrate::fit(&scores, &labels);

    let current_ece = calibrate::expected_calibration_error(
        &scores.iter().map(|&s| current.apply(s)).collect::<Vec<_>>(),
        &labels,
    );
    let fitted_ece = calibrate::expected_calibration_error(
        &scores.iter().map(|&s| fitted.apply(s)).collect::<Vec<_>>(),
        &labels,
    );
    let chosen = if fitted_ece <= current_ece { fitted } else { current };

    let mut changes: BTreeMap<(ArtifactKind, String), Vec<u8>> = BTreeMap::new();
    changes.insert(
        (ArtifactKind::Model, "calibration".into()),
        serde_json::to_vec(&chosen).map_err(|e| TrainError::Json(e.to_string()))?,
    );
    let meta = SnapshotMeta {
        lineage: format!("recalibrate on {} labels", window.len()),
        created_ms,
        compat: snapshot.meta.compat.clone(),
    };
    Ok(store.commit(branch, changes, meta, None)?)
}

/// Warm-starts from the branch head's parameters and continues training on
/// the delta rows at a tenth of the learning rate. The view must match the
/// snapshot's; a zero step budget changes nothing but lineage.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    store: &ModelStore,
    branch: &str,
    view: &FeatureView,
    delta_rows: &[usize],
    step_budget: usize,
    spec: &TrainerSpec,
    objective: &str,
    metric: MetricKind,
    created_ms: i64,
) -> Result<(TrainedModel, Snapshot), TrainError> {
    let head = store.branch_head(branch)?;
    let snapshot = store.load_snapshot(&head)?;
    let mut model = load_model(store, &snapshot)?;
    if model.view_ref != view.id {
        return Err(TrainError::ManifestMismatch {
            expected: model.view_ref,
            got: view.id.clone(),
        });
    }

    if step_budget > 0 && !delta_rows.is_empty() {
        let x = view.matrix(&model.feature_names, delta_rows)?;
        let y = target_values(view, delta_rows)?;
        let deadline = Instant::now() + Duration::from_secs_f64(spec.caps.max_seconds);
        let (params, capped) = fit_params(
            spec,
            &x,
            &y,
            Some(&model.params),
            Some(deadline),
            Some(step_budget),
            0.1,
        );
        model.params = params;
        model.capped = capped;
    }

    let val_rows = view.segment_rows(Segment::Val);
    let x_val = view.matrix(&model.feature_names, &val_rows)?;
    let y_val = target_values(view, &val_rows)?;
    let probabilistic = matches!(model.learner, Learner::RegularizedLogistic);
    model.eval = evaluate(&model.params, &model.calibration, &x_val, &y_val, probabilistic);

    let lineage = format!("finetune {} steps on {} rows", step_budget, delta_rows.len());
    let snapshot = commit_model(
        &model, view, objective, metric, store, branch, created_ms, Some(lineage),
    )?;
    Ok((model, snapshot))
}

/// Trains every learner kind and returns the models ordered best-first on
/// the given validation metric: the model-zoo candidate trial.
pub fn train_zoo(
    view: &FeatureView,
    base: &TrainerSpec,
    objective: &str,
    metric: MetricKind,
    store: &ModelStore,
    branch: &str,
    created_ms: i64,
) -> Result<Vec<(TrainedModel, Snapshot)>, TrainError> {
    let mut out = Vec::new();
    for learner in Learner::all() {
        let mut spec = base.clone();
        spec.learner = learner;
        out.push(train(view, &spec, objective, metric, store, branch, created_ms)?);
    }
    out.sort_by(|(a, _), (b, _)| {
        let ma = a.eval.get(metric.name()).copied().unwrap_or(f64::NAN);
        let mb = b.eval.get(metric.name()).copied().unwrap_or(f64::NAN);
        if metric.higher_is_better() {
            mb.total_cmp(&ma)
        } else {
            ma.total_cmp(&mb)
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Catalog, DatasetDescriptor, FieldDef, FieldKind, Record, Value};
    use crate::feature::build_view;
    use crate::select::{select, SelectionSpec};
    use crate::store::DEFAULT_BRANCH;

    fn separable_view(n: usize) -> FeatureView {
        let catalog = Catalog::new();
        let schema = vec![
            FieldDef {
                name: "y".into(),
                kind: FieldKind::Numeric,
            },
            FieldDef {
                name: "x1".into(),
                kind: FieldKind::Numeric,
            },
            FieldDef {
                name: "x2".into(),
                kind: FieldKind::Numeric,
            },
        ];
        let h = catalog
            .register_dataset(DatasetDescriptor::new("d", schema))
            .unwrap();
        let records: Vec<Record> = (0..n)
            .map(|i| {
                let class = (i % 2) as f64;
                let x1 = if class > 0.5 {
                    2.0 + (i % 5) as f64
                } else {
                    -2.0 - (i % 5) as f64
                };
                Record::new(format!("r{i:04}"))
                    .at(i as i64)
                    .with("y", Value::Number(class))
                    .with("x1", Value::Number(x1))
                    .with("x2", Value::Number((i % 7) as f64))
            })
            .collect();
        h.write().unwrap().ingest(records);
        let ds = h.read().unwrap();
        let ws = select(&ds, &SelectionSpec::new("y", "accuracy", n)).unwrap();
        build_view(&ds, &ws, "y").unwrap()
    }

    #[test]
    fn separable_data_reaches_full_train_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let view = separable_view(200);
        let spec = TrainerSpec::new(Learner::RegularizedLogistic);
        let (model, snapshot) = train(
            &view,
            &spec,
            "classify",
            MetricKind::Accuracy,
            &store,
            DEFAULT_BRANCH,
            1,
        )
        .unwrap();
        // Train accuracy 1.0 on a separable problem.
        let train_rows = view.segment_rows(Segment::Train);
        let x = view.matrix(&model.feature_names, &train_rows).unwrap();
        let y = target_values(&view, &train_rows).unwrap();
        let acc = MetricKind::Accuracy.compute(
            &x.iter().map(|r| model.predict_raw(r)).collect::<Vec<_>>(),
            &y,
        );
        assert_eq!(acc, 1.0);
        // All four artifact classes are present.
        for (kind, name) in [
            (ArtifactKind::Model, "parameters"),
            (ArtifactKind::Model, "calibration"),
            (ArtifactKind::Tensor, "features"),
            (ArtifactKind::Metadata, "evals"),
            (ArtifactKind::Index, "resolution"),
        ] {
            assert!(snapshot.artifact(kind, name).is_some(), "missing {kind:?}/{name}");
        }
    }

    #[test]
    fn deterministic_parameter_blob() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let view = separable_view(100);
        let spec = TrainerSpec::new(Learner::RegularizedLogistic);
        let (m1, s1) = train(&view, &spec, "classify", MetricKind::Accuracy, &store, DEFAULT_BRANCH, 1).unwrap();
        let (m2, s2) = train(&view, &spec, "classify", MetricKind::Accuracy, &store, DEFAULT_BRANCH, 1).unwrap();
        assert_eq!(
            crate::util::sha256_hex(&m1.params_blob()),
            crate::util::sha256_hex(&m2.params_blob())
        );
        assert_eq!(
            s1.artifact(ArtifactKind::Model, "parameters").unwrap().hash,
            s2.artifact(ArtifactKind::Model, "parameters").unwrap().hash
        );
    }

    #[test]
    fn empty_train_segment_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let mut view = separable_view(50);
        for s in view.segments.iter_mut() {
            *s = Segment::Serve;
        }
        let spec = TrainerSpec::new(Learner::RegularizedLinear);
        assert!(matches!(
            train(&view, &spec, "regress", MetricKind::Rmse, &store, DEFAULT_BRANCH, 1),
            Err(TrainError::EmptyTrainSegment)
        ));
    }

    #[test]
    fn degenerate_target_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let mut view = separable_view(50);
        // Flatten the target.
        if let Some(col) = view.columns.iter_mut().find(|c| c.name == "y") {
            if let crate::feature::ColumnData::Numeric(v) = &mut col.data {
                for x in v.iter_mut() {
                    *x = 1.0;
                }
            }
        }
        let spec = TrainerSpec::new(Learner::RegularizedLinear);
        assert!(matches!(
            train(&view, &spec, "regress", MetricKind::Rmse, &store, DEFAULT_BRANCH, 1),
            Err(TrainError::DegenerateTarget)
        ));
    }

    #[test]
    fn resource_cap_returns_best_so_far_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let view = separable_view(400);
        let mut spec = TrainerSpec::new(Learner::RegularizedLogistic);
        spec.hyper.epochs = 5_000_000; // far beyond the time cap
        spec.caps.max_seconds = 0.05;
        let (model, snapshot) = train(
            &view,
            &spec,
            "classify",
            MetricKind::Accuracy,
            &store,
            DEFAULT_BRANCH,
            1,
        )
        .unwrap();
        assert!(model.capped, "cap must be reported");
        // The best-so-far model still committed and still predicts.
        assert!(snapshot.artifact(ArtifactKind::Model, "parameters").is_some());
        let meta_ref = snapshot.artifact(ArtifactKind::Metadata, "evals").unwrap();
        let metadata: serde_json::Value =
            serde_json::from_slice(&store.reconstruct(&meta_ref.hash).unwrap()).unwrap();
        assert_eq!(metadata["capped"], serde_json::json!(true));
    }

    #[test]
    fn recalibrate_changes_exactly_one_manifest_entry() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let view = separable_view(300);
        let spec = TrainerSpec::new(Learner::RegularizedLogistic);
        let (_, trained) =
            train(&view, &spec, "classify", MetricKind::Accuracy, &store, DEFAULT_BRANCH, 1).unwrap();

        // Overconfident synthetic window.
        let window: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let p_true = 0.3 + 0.4 * (i as f64 / 199.0);
                let s = (0.5 + (p_true - 0.5) * 2.0).clamp(0.0, 1.0);
                let label = if (i * 7919) % 200 < (p_true * 200.0) as usize {
                    1.0
                } else {
                    0.0
                };
                (s, label)
            })
            .collect();
        let recal = recalibrate(&store, DEFAULT_BRANCH, &window, 2).unwrap();

        let mut diff = 0;
        for (key, blob) in &recal.manifest {
            if trained.manifest.get(key) != Some(blob) {
                diff += 1;
                assert_eq!(key, "model/calibration");
            }
        }
        assert_eq!(diff, 1, "recalibration must change exactly the calibration");
    }

    #[test]
    fn recalibrate_requires_labels_and_never_worsens_ece() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let view = separable_view(300);
        let spec = TrainerSpec::new(Learner::RegularizedLogistic);
        train(&view, &spec, "classify", MetricKind::Accuracy, &store, DEFAULT_BRANCH, 1).unwrap();

        assert!(matches!(
            recalibrate(&store, DEFAULT_BRANCH, &[(0.5, 1.0); 10], 2),
            Err(TrainError::InsufficientLabels { .. })
        ));

        // Perfectly calibrated window: fitted map stays identity-like and
        // ECE does not increase.
        let window: Vec<(f64, f64)> = (0..200).map(|i| {
            let p = i as f64 / 199.0;
            (p, p)
        }).collect();
        let snap = recalibrate(&store, DEFAULT_BRANCH, &window, 3).unwrap();
        let cal_ref = snap.artifact(ArtifactKind::Model, "calibration").unwrap();
        let map: CalibrationMap =
            serde_json::from_slice(&store.reconstruct(&cal_ref.hash).unwrap()).unwrap();
        assert!(map.is_identity_within(1e-6));
    }

    #[test]
    fn finetune_zero_budget_keeps_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let view = separable_view(200);
        let spec = TrainerSpec::new(Learner::RegularizedLogistic);
        let (_, trained) =
            train(&view, &spec, "classify", MetricKind::Accuracy, &store, DEFAULT_BRANCH, 1).unwrap();
        let (_, tuned) = finetune(
            &store,
            DEFAULT_BRANCH,
            &view,
            &[],
            0,
            &spec,
            "classify",
            MetricKind::Accuracy,
            2,
        )
        .unwrap();
        assert_eq!(
            trained.artifact(ArtifactKind::Model, "parameters").unwrap().hash,
            tuned.artifact(ArtifactKind::Model, "parameters").unwrap().hash
        );
        assert_ne!(trained.version, tuned.version);
    }

    #[test]
    fn finetune_requires_matching_view() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let view = separable_view(200);
        let spec = TrainerSpec::new(Learner::RegularizedLogistic);
        train(&view, &spec, "classify", MetricKind::Accuracy, &store, DEFAULT_BRANCH, 1).unwrap();
        let mut other = separable_view(100);
        other.id = "different-view".into();
        assert!(matches!(
            finetune(
                &store,
                DEFAULT_BRANCH,
                &other,
                &[0, 1],
                5,
                &spec,
                "classify",
                MetricKind::Accuracy,
                2
            ),
            Err(TrainError::ManifestMismatch { .. })
        ));
    }

    #[test]
    fn finetune_on_same_distribution_stays_close() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let view = separable_view(400);
        let spec = TrainerSpec::new(Learner::RegularizedLogistic);
        let (parent, _) =
            train(&view, &spec, "classify", MetricKind::Accuracy, &store, DEFAULT_BRANCH, 1).unwrap();
        let train_rows = view.segment_rows(Segment::Train);
        let delta: Vec<usize> = train_rows.iter().copied().take(40).collect();
        let (tuned, _) = finetune(
            &store,
            DEFAULT_BRANCH,
            &view,
            &delta,
            20,
            &spec,
            "classify",
            MetricKind::Accuracy,
            2,
        )
        .unwrap();
        let parent_acc = parent.eval.get("accuracy").copied().unwrap_or(0.0);
        let tuned_acc = tuned.eval.get("accuracy").copied().unwrap_or(0.0);
        assert!(
            (parent_acc - tuned_acc).abs() <= 0.1,
            "val accuracy drifted: {parent_acc} -> {tuned_acc}"
        );
    }

    #[test]
    fn zoo_orders_models_by_metric() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let view = separable_view(200);
        let spec = TrainerSpec::new(Learner::RegularizedLogistic);
        let ranked = train_zoo(
            &view,
            &spec,
            "classify",
            MetricKind::Accuracy,
            &store,
            DEFAULT_BRANCH,
            1,
        )
        .unwrap();
        assert_eq!(ranked.len(), 3);
        let accs: Vec<f64> = ranked
            .iter()
            .map(|(m, _)| m.eval.get("accuracy").copied().unwrap_or(0.0))
            .collect();
        for w in accs.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn model_round_trips_through_store() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::open(dir.path()).unwrap();
        let view = separable_view(150);
        let spec = TrainerSpec::new(Learner::DecisionStumpEnsemble);
        let (model, snapshot) =
            train(&view, &spec, "classify", MetricKind::Accuracy, &store, DEFAULT_BRANCH, 1).unwrap();
        let loaded = load_model(&store, &snapshot).unwrap();
        assert_eq!(model.params_blob(), loaded.params_blob());
        assert_eq!(model.feature_names, loaded.feature_names);
    }
}
