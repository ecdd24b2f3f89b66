//! Task-aligned drift detection.
//!
//! Each monitored model carries a small spec: slices, metrics, a window
//! length W and a baseline horizon of B completed windows. Per slice the
//! monitor keeps a filling window and a rolling baseline; when a window
//! completes it is scored against the baseline with a label-free signal
//! (population stability index over a 10-bin score histogram fitted on
//! the baseline, debiased and normalized by `max(0.2, null quantile)`)
//! and, when fully labeled, per-metric z statistics (robust center and
//! spread, normalized by `z_ref = 3`). A channel counts only when it
//! holds across two consecutive windows; the aggregate drift score is the
//! max over slices of the persisting channel signals, and events fire
//! through a two-threshold hysteresis latch so scores oscillating near
//! the threshold cannot flap.
//!
//! Feature-distribution summaries are never inputs here: events require a
//! score-histogram or metric signal by construction.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::train::calibrate::expected_calibration_error;
use crate::train::MetricKind;

pub const PSI_REFERENCE: f64 = 0.2;
pub const Z_REFERENCE: f64 = 3.0;
pub const PSI_BINS: usize = 10;
pub const PSI_SMOOTHING: f64 = 1e-4;
/// Calibration drift contributes at half the metric weight.
pub const CALIBRATION_WEIGHT: f64 = 0.5;
const SCORE_PATH_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("invalid monitoring spec: {0}")]
    BadSpec(String),
    #[error("model version `{0}` is already registered")]
    DuplicateRegistration(String),
    #[error("model version `{0}` is not registered")]
    UnknownMonitor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("encoding: {0}")]
    Json(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlicePredicate {
    pub field: String,
    pub value: String,
}

impl SlicePredicate {
    pub fn name(&self) -> String {
        format!("{}={}", self.field, self.value)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonitoringSpec {
    pub model_version: String,
    #[serde(default)]
    pub slices: Vec<SlicePredicate>,
    #[serde(default)]
    pub metrics: Vec<MetricKind>,
    /// Window length W in observations.
    pub window: usize,
    /// Baseline horizon B in completed windows.
    pub baseline_windows: usize,
    #[serde(default = "default_theta_up")]
    pub theta_up: f64,
    #[serde(default = "default_theta_down")]
    pub theta_down: f64,
    #[serde(default = "default_evidence_budget")]
    pub evidence_budget: usize,
}

fn default_theta_up() -> f64 {
    1.0
}

fn default_theta_down() -> f64 {
    0.7
}

fn default_evidence_budget() -> usize {
    8
}

impl MonitoringSpec {
    pub fn new(model_version: impl Into<String>, window: usize, baseline_windows: usize) -> Self {
        MonitoringSpec {
            model_version: model_version.into(),
            slices: Vec::new(),
            metrics: Vec::new(),
            window,
            baseline_windows,
            theta_up: default_theta_up(),
            theta_down: default_theta_down(),
            evidence_budget: default_evidence_budget(),
        }
    }

    pub fn validate(&self) -> Result<(), DriftError> {
        if self.window < 30 {
            return Err(DriftError::BadSpec("window must be at least 30".into()));
        }
        if self.baseline_windows < 3 {
            return Err(DriftError::BadSpec(
                "baseline horizon must be at least 3 windows".into(),
            ));
        }
        if !(self.theta_up > self.theta_down && self.theta_down > 0.0) {
            return Err(DriftError::BadSpec(
                "thresholds must satisfy theta_up > theta_down > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One scored observation entering the monitor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Observation {
    #[serde(default)]
    pub slice_values: BTreeMap<String, String>,
    pub score: f64,
    #[serde(default)]
    pub label: Option<f64>,
    #[serde(default)]
    pub timestamp: i64,
    /// (dataset, record id) reference for evidence samples.
    #[serde(default)]
    pub evidence: Option<(String, String)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceReport {
    pub slice: String,
    pub psi: f64,
    /// metric -> (current − baseline mean), signed.
    pub metric_deltas: BTreeMap<String, f64>,
    /// metric -> z statistic.
    pub metric_z: BTreeMap<String, f64>,
    pub calibration_delta: Option<f64>,
    pub signal: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DriftEvent {
    pub model_version: String,
    pub slices: Vec<SliceReport>,
    pub score: f64,
    pub evidence: Vec<(String, String)>,
    pub at_ms: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftAction {
    Keep,
    Recalibrate,
    FineTune,
    TryZooCandidate,
}

/// Two-threshold latch: fires on crossing `up` while disarmed, re-arms
/// only after dipping to `down`.
#[derive(Clone, Copy, Debug)]
pub struct Hysteresis {
    pub up: f64,
    pub down: f64,
    pub armed: bool,
}

impl Hysteresis {
    pub fn new(up: f64, down: f64) -> Self {
        Hysteresis {
            up,
            down,
            armed: false,
        }
    }

    /// Feeds one score; true means an event fires now.
    pub fn observe(&mut self, score: f64) -> bool {
        if self.armed {
            if score <= self.down {
                self.armed = false;
            }
            return false;
        }
        if score >= self.up {
            self.armed = true;
            return true;
        }
        false
    }
}

#[derive(Clone, Debug)]
struct WindowSummary {
    scores: Vec<f64>,
    metrics: BTreeMap<MetricKind, f64>,
    analytic_var: BTreeMap<MetricKind, f64>,
    ece: Option<f64>,
    evidence: Vec<(String, String)>,
    last_ts: i64,
}

/// Per-channel threshold-normalized signals for one scored window.
#[derive(Clone, Debug, Default)]
struct ChannelSignals {
    psi: f64,
    psi_signal: f64,
    /// metric name -> (delta vs baseline mean, z, z / z_ref).
    metrics: BTreeMap<String, (f64, f64, f64)>,
    /// (delta, weighted signal).
    calibration: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default)]
struct SliceSignal {
    psi: f64,
    metric_deltas: BTreeMap<String, f64>,
    metric_z: BTreeMap<String, f64>,
    calibration_delta: Option<f64>,
    signal: f64,
}

struct SliceState {
    current: Vec<Observation>,
    baseline: VecDeque<WindowSummary>,
    /// 10-bin equal-frequency edges fitted once on the first full baseline.
    edges: Option<Vec<f64>>,
    /// Channel signals of the previous scored window, for persistence.
    prev: Option<ChannelSignals>,
    last: SliceSignal,
}

impl SliceState {
    fn new() -> Self {
        SliceState {
            current: Vec::new(),
            baseline: VecDeque::new(),
            edges: None,
            prev: None,
            last: SliceSignal::default(),
        }
    }
}

/// Per-model drift state.
pub struct Monitor {
    spec: MonitoringSpec,
    slices: BTreeMap<String, SliceState>,
    latch: Hysteresis,
    aggregate: f64,
    pending: VecDeque<(DriftEvent, DriftAction)>,
    /// Recent aggregate scores (bounded), for flap auditing.
    score_path: Vec<f64>,
    events_emitted: usize,
}

impl Monitor {
    pub fn new(spec: MonitoringSpec) -> Result<Self, DriftError> {
        spec.validate()?;
        let mut slices = BTreeMap::new();
        if spec.slices.is_empty() {
            slices.insert("__all__".to_string(), SliceState::new());
        } else {
            for p in &spec.slices {
                slices.insert(p.name(), SliceState::new());
            }
        }
        Ok(Monitor {
            latch: Hysteresis::new(spec.theta_up, spec.theta_down),
            spec,
            slices,
            aggregate: 0.0,
            pending: VecDeque::new(),
            score_path: Vec::new(),
            events_emitted: 0,
        })
    }

    pub fn spec(&self) -> &MonitoringSpec {
        &self.spec
    }

    pub fn aggregate_score(&self) -> f64 {
        self.aggregate
    }

    pub fn score_path(&self) -> &[f64] {
        &self.score_path
    }

    pub fn events_emitted(&self) -> usize {
        self.events_emitted
    }

    /// Approximate retained-state size, for the bounded-memory property.
    pub fn state_observation_count(&self) -> usize {
        self.slices
            .values()
            .map(|s| {
                s.current.len()
                    + s.baseline.iter().map(|w| w.scores.len()).sum::<usize>()
            })
            .sum()
    }

    fn matching_slices(&self, obs: &Observation) -> Vec<String> {
        if self.spec.slices.is_empty() {
            return vec!["__all__".to_string()];
        }
        self.spec
            .slices
            .iter()
            .filter(|p| obs.slice_values.get(&p.field) == Some(&p.value))
            .map(|p| p.name())
            .collect()
    }

    /// Feeds a micro-batch. Returns the aggregate drift score after the
    /// batch. Unlabeled observations update label-free state only. The
    /// hysteresis latch reacts once per batch that completes at least one
    /// window, so slices moving in lockstep land in the same event.
    pub fn observe(&mut self, batch: &[Observation]) -> f64 {
        let mut completed = false;
        for obs in batch {
            for name in self.matching_slices(obs) {
                let w = self.spec.window;
                let state = self.slices.get_mut(&name).expect("slice exists");
                state.current.push(obs.clone());
                if state.current.len() >= w {
                    self.complete_window(&name);
                    completed = true;
                }
            }
        }
        if completed {
            let aggregate = self
                .slices
                .values()
                .map(|s| s.last.signal)
                .fold(0.0f64, f64::max);
            self.aggregate = aggregate;
            if self.score_path.len() == SCORE_PATH_CAP {
                self.score_path.remove(0);
            }
            self.score_path.push(aggregate);
            if self.latch.observe(aggregate) {
                let event = self.build_event();
                let action = suggest_action(&event);
                self.events_emitted += 1;
                self.pending.push_back((event, action));
            }
        }
        self.aggregate
    }

    fn complete_window(&mut self, slice_name: &str) {
        let spec_metrics = self.spec.metrics.clone();
        let budget = self.spec.evidence_budget;
        let b = self.spec.baseline_windows;
        let state = self.slices.get_mut(slice_name).expect("slice exists");
        let window: Vec<Observation> = std::mem::take(&mut state.current);
        let summary = summarize(&window, &spec_metrics, budget);

        if state.baseline.len() >= b {
            if state.edges.is_none() {
                let pooled: Vec<f64> = state
                    .baseline
                    .iter()
                    .flat_map(|w| w.scores.iter().copied())
                    .collect();
                state.edges = Some(equal_frequency_edges(&pooled, PSI_BINS));
            }
            let edges = state.edges.as_ref().unwrap();
            let now = score_window(&summary, &state.baseline, edges, &spec_metrics);
            // Persistence: a change counts only when it holds for two
            // consecutive windows, so each channel's effective signal is
            // the weaker of the current and previous window's.
            let prev = state.prev.replace(now.clone());
            state.last = effective_signal(&now, prev.as_ref());
        }
        state.baseline.push_back(summary);
        while state.baseline.len() > b {
            state.baseline.pop_front();
        }
    }

    fn build_event(&self) -> DriftEvent {
        let mut reports = Vec::new();
        let mut evidence = Vec::new();
        let mut last_ts = 0i64;
        for (name, state) in &self.slices {
            if state.last.signal >= self.spec.theta_up {
                reports.push(SliceReport {
                    slice: name.clone(),
                    psi: state.last.psi,
                    metric_deltas: state.last.metric_deltas.clone(),
                    metric_z: state.last.metric_z.clone(),
                    calibration_delta: state.last.calibration_delta,
                    signal: state.last.signal,
                });
                if let Some(w) = state.baseline.back() {
                    last_ts = last_ts.max(w.last_ts);
                    for e in &w.evidence {
                        if evidence.len() < self.spec.evidence_budget {
                            evidence.push(e.clone());
                        }
                    }
                }
            }
        }
        DriftEvent {
            model_version: self.spec.model_version.clone(),
            slices: reports,
            score: self.aggregate,
            evidence,
            at_ms: last_ts,
        }
    }

    /// Pops the next pending event, if any.
    pub fn poll(&mut self) -> Option<(DriftEvent, DriftAction)> {
        self.pending.pop_front()
    }
}

fn summarize(
    window: &[Observation],
    metrics: &[MetricKind],
    evidence_budget: usize,
) -> WindowSummary {
    let scores: Vec<f64> = window.iter().map(|o| o.score).collect();
    let labeled: Vec<(f64, f64)> = window
        .iter()
        .filter_map(|o| o.label.map(|l| (o.score, l)))
        .collect();
    let mut metric_values = BTreeMap::new();
    let mut analytic_var = BTreeMap::new();
    let mut ece = None;
    // Label-based statistics need the full window labeled.
    if labeled.len() == window.len() && !window.is_empty() {
        let preds: Vec<f64> = labeled.iter().map(|(s, _)| *s).collect();
        let labels: Vec<f64> = labeled.iter().map(|(_, l)| *l).collect();
        for m in metrics {
            let value = m.compute(&preds, &labels);
            metric_values.insert(*m, value);
            analytic_var.insert(*m, analytic_metric_variance(*m, value, &preds, &labels));
        }
        let binaryish = labels.iter().all(|&l| l == 0.0 || l == 1.0)
            && preds.iter().all(|&p| (0.0..=1.0).contains(&p));
        if binaryish {
            ece = Some(expected_calibration_error(&preds, &labels));
        }
    }
    let evidence: Vec<(String, String)> = window
        .iter()
        .filter_map(|o| o.evidence.clone())
        .take(evidence_budget)
        .collect();
    WindowSummary {
        scores,
        metrics: metric_values,
        analytic_var,
        ece,
        evidence,
        last_ts: window.iter().map(|o| o.timestamp).max().unwrap_or(0),
    }
}

/// Sampling variance of a window metric, used to stabilize the z
/// denominator at small baseline horizons.
fn analytic_metric_variance(
    metric: MetricKind,
    value: f64,
    preds: &[f64],
    labels: &[f64],
) -> f64 {
    let n = preds.len().max(1) as f64;
    match metric {
        MetricKind::Accuracy => (value * (1.0 - value)).max(1e-6) / n,
        MetricKind::Rmse => {
            // Delta method through mse = mean(e^2).
            let mse = value * value;
            if mse <= 0.0 {
                return 1e-12;
            }
            let sq_errors: Vec<f64> = preds
                .iter()
                .zip(labels)
                .map(|(p, y)| (p - y) * (p - y))
                .collect();
            let mean = mse;
            let var_sq = sq_errors
                .iter()
                .map(|e| (e - mean) * (e - mean))
                .sum::<f64>()
                / n;
            (var_sq / n) / (4.0 * mse)
        }
        MetricKind::Auc => {
            // Hanley–McNeil.
            let pos = labels.iter().filter(|&&l| l >= 0.5).count().max(1) as f64;
            let neg = labels.iter().filter(|&&l| l < 0.5).count().max(1) as f64;
            let a = value.clamp(1e-6, 1.0 - 1e-6);
            let q1 = a / (2.0 - a);
            let q2 = 2.0 * a * a / (1.0 + a);
            ((a * (1.0 - a) + (pos - 1.0) * (q1 - a * a) + (neg - 1.0) * (q2 - a * a))
                / (pos * neg))
                .max(1e-12)
        }
    }
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Variance estimate from the median absolute deviation (normal scale).
fn mad_variance(values: &[f64], center: f64) -> f64 {
    let deviations: Vec<f64> = values.iter().map(|v| (v - center).abs()).collect();
    let mad = median(&deviations);
    let sigma = 1.4826 * mad;
    sigma * sigma
}

/// Wilson–Hilferty chi-square quantile approximation at `z` standard
/// normal deviations.
fn chi2_quantile(dof: f64, z: f64) -> f64 {
    let k = dof.max(1.0);
    let t = 1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt();
    k * t * t * t
}

fn equal_frequency_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let mut edges = Vec::new();
    if m == 0 {
        return edges;
    }
    for j in 1..bins {
        edges.push(sorted[(j * m / bins).min(m - 1)]);
    }
    edges
}

fn histogram(values: &[f64], edges: &[f64]) -> Vec<f64> {
    let mut counts = vec![0f64; edges.len() + 1];
    for &v in values {
        let bin = edges.partition_point(|&e| e <= v);
        counts[bin] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        for c in counts.iter_mut() {
            *c /= total;
        }
    }
    counts
}

/// Population stability index between two score samples over shared bins.
pub fn population_stability_index(current: &[f64], baseline: &[f64], edges: &[f64]) -> f64 {
    let p = histogram(current, edges);
    let q = histogram(baseline, edges);
    p.iter()
        .zip(&q)
        .map(|(&pi, &qi)| {
            let pi = pi.max(PSI_SMOOTHING);
            let qi = qi.max(PSI_SMOOTHING);
            (pi - qi) * (pi / qi).ln()
        })
        .sum()
}

fn score_window(
    summary: &WindowSummary,
    baseline: &VecDeque<WindowSummary>,
    edges: &[f64],
    metrics: &[MetricKind],
) -> ChannelSignals {
    let pooled: Vec<f64> = baseline
        .iter()
        .flat_map(|w| w.scores.iter().copied())
        .collect();
    let psi_raw = population_stability_index(&summary.scores, &pooled, edges);
    // Under the null, PSI is roughly a scaled chi-square:
    // psi / (1/n_cur + 1/n_base) ~ chi2(bins - 1), with a fat tail from
    // smoothing-floored empty bins at small windows. The signal therefore
    // clears both the textbook 0.2 reference and twice the ~3.5-sigma
    // null quantile; the quantile term vanishes as windows grow.
    let scale =
        1.0 / summary.scores.len().max(1) as f64 + 1.0 / pooled.len().max(1) as f64;
    let dof = edges.len() as f64; // bins - 1
    let bias = dof * scale;
    let null_quantile = 2.0 * (chi2_quantile(dof, 3.5) - dof) * scale;
    let psi = (psi_raw - bias).max(0.0);
    let psi_signal = psi / PSI_REFERENCE.max(null_quantile);

    let mut metric_signals = BTreeMap::new();
    for m in metrics {
        let Some(&current) = summary.metrics.get(m) else {
            continue;
        };
        let base_vals: Vec<f64> = baseline.iter().filter_map(|w| w.metrics.get(m).copied()).collect();
        if base_vals.len() < baseline.len() || base_vals.is_empty() {
            continue; // baseline not fully labeled for this metric
        }
        // Robust center and spread: a single drifted window already
        // absorbed into the rolling baseline must not poison the test.
        let center = median(&base_vals);
        let mad_var = mad_variance(&base_vals, center);
        let analytic = summary.analytic_var.get(m).copied().unwrap_or(0.0);
        let b = base_vals.len() as f64;
        let sigma = (mad_var.max(analytic) * (1.0 + 1.0 / b) + 1e-12).sqrt();
        let z = (current - center).abs() / sigma;
        metric_signals.insert(m.name().to_string(), (current - center, z, z / Z_REFERENCE));
    }

    let mut calibration = None;
    if let Some(cur_ece) = summary.ece {
        let base_ece: Vec<f64> = baseline.iter().filter_map(|w| w.ece).collect();
        if base_ece.len() == baseline.len() && !base_ece.is_empty() {
            let center = median(&base_ece);
            let var = mad_variance(&base_ece, center);
            let n = summary.scores.len().max(1) as f64;
            let sigma = (var + 1.0 / n + 1e-12).sqrt();
            let z_cal = (cur_ece - center).abs() / sigma;
            calibration = Some((cur_ece - center, CALIBRATION_WEIGHT * z_cal / Z_REFERENCE));
        }
    }

    ChannelSignals {
        psi,
        psi_signal,
        metrics: metric_signals,
        calibration,
    }
}

/// Combines the current window's channel signals with the previous
/// window's: a channel contributes the weaker of the two, so only changes
/// persisting across consecutive windows drive the drift score.
fn effective_signal(now: &ChannelSignals, prev: Option<&ChannelSignals>) -> SliceSignal {
    let prev_psi = prev.map(|p| p.psi_signal).unwrap_or(0.0);
    let mut signal = now.psi_signal.min(prev_psi);
    let mut metric_deltas = BTreeMap::new();
    let mut metric_z = BTreeMap::new();
    for (name, &(delta, z, sig)) in &now.metrics {
        let prev_sig = prev
            .and_then(|p| p.metrics.get(name).map(|&(_, _, s)| s))
            .unwrap_or(0.0);
        metric_deltas.insert(name.clone(), delta);
        metric_z.insert(name.clone(), z);
        signal = signal.max(sig.min(prev_sig));
    }
    let mut calibration_delta = None;
    if let Some((delta, sig)) = now.calibration {
        let prev_sig = prev.and_then(|p| p.calibration.map(|(_, s)| s)).unwrap_or(0.0);
        calibration_delta = Some(delta);
        signal = signal.max(sig.min(prev_sig));
    }
    SliceSignal {
        psi: now.psi,
        metric_deltas,
        metric_z,
        calibration_delta,
        signal,
    }
}

fn suggest_action(event: &DriftEvent) -> DriftAction {
    let metric_sliced: Vec<&SliceReport> = event
        .slices
        .iter()
        .filter(|r| r.metric_z.values().any(|&z| z >= Z_REFERENCE))
        .collect();
    match metric_sliced.len() {
        0 => {
            if event.slices.iter().any(|r| r.psi >= PSI_REFERENCE) {
                DriftAction::Recalibrate
            } else {
                DriftAction::Keep
            }
        }
        1 => DriftAction::FineTune,
        _ => DriftAction::TryZooCandidate,
    }
}

/// Registry of monitors keyed by model version.
#[derive(Default)]
pub struct MonitorRegistry {
    monitors: BTreeMap<String, Monitor>,
}

impl MonitorRegistry {
    pub fn new() -> Self {
        MonitorRegistry::default()
    }

    pub fn register(&mut self, spec: MonitoringSpec) -> Result<&mut Monitor, DriftError> {
        let key = spec.model_version.clone();
        if self.monitors.contains_key(&key) {
            return Err(DriftError::DuplicateRegistration(key));
        }
        let monitor = Monitor::new(spec)?;
        Ok(self.monitors.entry(key).or_insert(monitor))
    }

    pub fn get_mut(&mut self, model_version: &str) -> Result<&mut Monitor, DriftError> {
        self.monitors
            .get_mut(model_version)
            .ok_or_else(|| DriftError::UnknownMonitor(model_version.to_string()))
    }

    pub fn get(&self, model_version: &str) -> Result<&Monitor, DriftError> {
        self.monitors
            .get(model_version)
            .ok_or_else(|| DriftError::UnknownMonitor(model_version.to_string()))
    }

    pub fn contains(&self, model_version: &str) -> bool {
        self.monitors.contains_key(model_version)
    }
}

/// Appends one event to a newline-delimited JSON log.
pub fn append_event(path: &std::path::Path, event: &DriftEvent) -> Result<(), DriftError> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let line = serde_json::to_string(event).map_err(|e| DriftError::Json(e.to_string()))?;
    writeln!(file, "{line}")?;
    Ok(())
}

pub fn read_events(path: &std::path::Path) -> Result<Vec<DriftEvent>, DriftError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let body = std::fs::read_to_string(path)?;
    let mut events = Vec::new();
    for line in body.lines() {
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(line).map_err(|e| DriftError::Json(e.to_string()))?);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn base_spec(metrics: Vec<MetricKind>, slices: Vec<SlicePredicate>) -> MonitoringSpec {
        let mut spec = MonitoringSpec::new("model-v1", 50, 4);
        spec.metrics = metrics;
        spec.slices = slices;
        spec
    }

    fn gaussian(rng: &mut StdRng, mean: f64, std: f64) -> f64 {
        // Box–Muller.
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        mean + std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn obs(slice: (&str, &str), score: f64, label: Option<f64>) -> Observation {
        let mut slice_values = BTreeMap::new();
        slice_values.insert(slice.0.to_string(), slice.1.to_string());
        Observation {
            slice_values,
            score,
            label,
            timestamp: 0,
            evidence: None,
        }
    }

    #[test]
    fn fresh_monitor_scores_zero() {
        let monitor = Monitor::new(base_spec(vec![], vec![])).unwrap();
        assert_eq!(monitor.aggregate_score(), 0.0);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut registry = MonitorRegistry::new();
        registry.register(base_spec(vec![], vec![])).unwrap();
        assert!(matches!(
            registry.register(base_spec(vec![], vec![])),
            Err(DriftError::DuplicateRegistration(_))
        ));
    }

    #[test]
    fn invalid_thresholds_rejected() {
        let mut spec = base_spec(vec![], vec![]);
        spec.theta_up = 0.5;
        spec.theta_down = 0.7;
        assert!(matches!(Monitor::new(spec), Err(DriftError::BadSpec(_))));
        let mut spec = base_spec(vec![], vec![]);
        spec.window = 10;
        assert!(matches!(Monitor::new(spec), Err(DriftError::BadSpec(_))));
    }

    #[test]
    fn empty_batch_changes_nothing() {
        let mut monitor = Monitor::new(base_spec(vec![], vec![])).unwrap();
        let before = monitor.state_observation_count();
        monitor.observe(&[]);
        assert_eq!(monitor.state_observation_count(), before);
        assert_eq!(monitor.aggregate_score(), 0.0);
    }

    #[test]
    fn hysteresis_single_event_on_sustained_high() {
        // Spec example: 0.5 -> 1.2 -> 0.9 -> 1.2 yields exactly one event
        // (0.9 stays above theta_down = 0.7, so the latch holds).
        let mut latch = Hysteresis::new(1.0, 0.7);
        let fires: Vec<bool> = [0.5, 1.2, 0.9, 1.2].iter().map(|&s| latch.observe(s)).collect();
        assert_eq!(fires, vec![false, true, false, false]);
    }

    #[test]
    fn hysteresis_refires_after_clearing() {
        // Spec example: 1.2 -> 0.6 -> 1.2 yields two events.
        let mut latch = Hysteresis::new(1.0, 0.7);
        let fires: Vec<bool> = [1.2, 0.6, 1.2].iter().map(|&s| latch.observe(s)).collect();
        assert_eq!(fires, vec![true, false, true]);
    }

    #[test]
    fn stationary_stream_stays_quiet() {
        let spec = base_spec(vec![MetricKind::Rmse], vec![]);
        let mut monitor = Monitor::new(spec).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..(50 * 12) {
            let truth = gaussian(&mut rng, 0.0, 1.0);
            let pred = truth + gaussian(&mut rng, 0.0, 0.5);
            monitor.observe(&[obs(("any", "x"), pred, Some(truth))]);
        }
        assert!(
            monitor.aggregate_score() < 1.0,
            "stationary aggregate {} crossed 1",
            monitor.aggregate_score()
        );
        assert!(monitor.poll().is_none());
    }

    #[test]
    fn mean_shift_fires_within_three_windows_naming_the_slice() {
        let slices = vec![
            SlicePredicate {
                field: "region".into(),
                value: "east".into(),
            },
            SlicePredicate {
                field: "region".into(),
                value: "west".into(),
            },
        ];
        let spec = base_spec(vec![MetricKind::Rmse], slices);
        let w = spec.window;
        let b = spec.baseline_windows;
        let mut monitor = Monitor::new(spec).unwrap();
        let mut rng = StdRng::seed_from_u64(11);

        // Warm both slices through the baseline horizon plus one scored
        // window.
        for _ in 0..((b + 1) * w) {
            for region in ["east", "west"] {
                let truth = gaussian(&mut rng, 0.0, 1.0);
                let pred = truth + gaussian(&mut rng, 0.0, 0.5);
                monitor.observe(&[obs(("region", region), pred, Some(truth))]);
            }
        }
        assert!(monitor.poll().is_none(), "no event during warmup");

        // Inject a 2-sigma shift into east scores only; west stays null.
        let mut fired_at = None;
        'outer: for window_idx in 0..3 {
            for _ in 0..w {
                let truth = gaussian(&mut rng, 0.0, 1.0);
                let shifted = truth + gaussian(&mut rng, 0.0, 0.5) + 2.0;
                monitor.observe(&[obs(("region", "east"), shifted, Some(truth))]);
                let truth_w = gaussian(&mut rng, 0.0, 1.0);
                let pred_w = truth_w + gaussian(&mut rng, 0.0, 0.5);
                monitor.observe(&[obs(("region", "west"), pred_w, Some(truth_w))]);
            }
            if let Some((event, _)) = monitor.poll() {
                fired_at = Some((window_idx, event));
                break 'outer;
            }
        }
        let (window_idx, event) = fired_at.expect("2-sigma shift must fire within 3 windows");
        assert!(window_idx < 3);
        let named: Vec<&str> = event.slices.iter().map(|r| r.slice.as_str()).collect();
        assert!(named.contains(&"region=east"), "event names {named:?}");
        assert!(!named.contains(&"region=west"), "undisturbed slice named: {named:?}");
    }

    #[test]
    fn psi_only_drift_suggests_recalibration() {
        // Unlabeled stream: only the score histogram can move.
        let spec = base_spec(vec![MetricKind::Rmse], vec![]);
        let w = spec.window;
        let b = spec.baseline_windows;
        let mut monitor = Monitor::new(spec).unwrap();
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..((b + 1) * w) {
            monitor.observe(&[obs(("s", "x"), gaussian(&mut rng, 0.0, 1.0), None)]);
        }
        let mut suggestion = None;
        for _ in 0..(3 * w) {
            monitor.observe(&[obs(("s", "x"), gaussian(&mut rng, 3.0, 1.0), None)]);
            if let Some((_, action)) = monitor.poll() {
                suggestion = Some(action);
                break;
            }
        }
        assert_eq!(suggestion, Some(DriftAction::Recalibrate));
    }

    #[test]
    fn multi_slice_metric_drift_suggests_zoo_candidate() {
        let slices = vec![
            SlicePredicate {
                field: "g".into(),
                value: "a".into(),
            },
            SlicePredicate {
                field: "g".into(),
                value: "b".into(),
            },
        ];
        let spec = base_spec(vec![MetricKind::Rmse], slices);
        let w = spec.window;
        let b = spec.baseline_windows;
        let mut monitor = Monitor::new(spec).unwrap();
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..((b + 1) * w) {
            for g in ["a", "b"] {
                let truth = gaussian(&mut rng, 0.0, 1.0);
                monitor.observe(&[obs(("g", g), truth + gaussian(&mut rng, 0.0, 0.3), Some(truth))]);
            }
        }
        // Shift both slices hard, feeding lockstep pairs in one batch so
        // both windows complete within the same micro-batch.
        let mut action = None;
        for _ in 0..(3 * w) {
            let ta = gaussian(&mut rng, 0.0, 1.0);
            let tb = gaussian(&mut rng, 0.0, 1.0);
            monitor.observe(&[
                obs(("g", "a"), ta + 3.0, Some(ta)),
                obs(("g", "b"), tb + 3.0, Some(tb)),
            ]);
            if let Some((event, a)) = monitor.poll() {
                assert!(event.slices.len() >= 2, "both slices should be named");
                action = Some(a);
                break;
            }
        }
        assert_eq!(action, Some(DriftAction::TryZooCandidate));
    }

    #[test]
    fn no_flap_between_events() {
        let spec = base_spec(vec![MetricKind::Rmse], vec![]);
        let w = spec.window;
        let b = spec.baseline_windows;
        let theta_down = spec.theta_down;
        let mut monitor = Monitor::new(spec).unwrap();
        let mut rng = StdRng::seed_from_u64(19);
        // Warmup.
        for _ in 0..((b + 1) * w) {
            let truth = gaussian(&mut rng, 0.0, 1.0);
            monitor.observe(&[obs(("s", "x"), truth + gaussian(&mut rng, 0.0, 0.4), Some(truth))]);
        }
        // Drift, recover (baseline absorbs), drift again.
        for phase in 0..4 {
            let shift = if phase % 2 == 0 { 3.0 } else { 0.0 };
            for _ in 0..((b + 1) * w) {
                let truth = gaussian(&mut rng, 0.0, 1.0);
                monitor.observe(&[obs(
                    ("s", "x"),
                    truth + gaussian(&mut rng, 0.0, 0.4) + shift,
                    Some(truth),
                )]);
            }
        }
        // Between any two emitted events the recorded score path must dip
        // to theta_down or below.
        let path = monitor.score_path();
        let mut last_fire: Option<usize> = None;
        let mut latch = Hysteresis::new(1.0, theta_down);
        for (i, &s) in path.iter().enumerate() {
            if latch.observe(s) {
                if let Some(prev) = last_fire {
                    let dipped = path[prev..i].iter().any(|&v| v <= theta_down);
                    assert!(dipped, "no dip below theta_down between events");
                }
                last_fire = Some(i);
            }
        }
        assert!(monitor.events_emitted() >= 2, "scenario should fire at least twice");
    }

    #[test]
    fn events_carry_evidence_refs_within_budget() {
        let mut spec = base_spec(vec![MetricKind::Rmse], vec![]);
        spec.evidence_budget = 3;
        let w = spec.window;
        let b = spec.baseline_windows;
        let mut monitor = Monitor::new(spec).unwrap();
        let mut rng = StdRng::seed_from_u64(31);
        let mut counter = 0u64;
        let mut feed = |monitor: &mut Monitor, rng: &mut StdRng, shift: f64| {
            let truth = gaussian(rng, 0.0, 1.0);
            counter += 1;
            let mut o = obs(("s", "x"), truth + gaussian(rng, 0.0, 0.4) + shift, Some(truth));
            o.evidence = Some(("events".to_string(), format!("r{counter:05}")));
            monitor.observe(&[o]);
        };
        for _ in 0..((b + 1) * w) {
            feed(&mut monitor, &mut rng, 0.0);
        }
        let mut event = None;
        for _ in 0..(3 * w) {
            feed(&mut monitor, &mut rng, 3.0);
            if let Some((e, _)) = monitor.poll() {
                event = Some(e);
                break;
            }
        }
        let event = event.expect("shift must fire");
        assert!(!event.evidence.is_empty(), "event needs evidence samples");
        assert!(event.evidence.len() <= 3, "budget respected");
        for (dataset, record) in &event.evidence {
            assert_eq!(dataset, "events");
            assert!(record.starts_with('r'));
        }
    }

    #[test]
    fn bounded_state() {
        let spec = base_spec(vec![MetricKind::Rmse], vec![]);
        let w = spec.window;
        let b = spec.baseline_windows;
        let mut monitor = Monitor::new(spec).unwrap();
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..(w * 50) {
            let truth = gaussian(&mut rng, 0.0, 1.0);
            monitor.observe(&[obs(("s", "x"), truth, Some(truth))]);
        }
        // State never exceeds (B + 1 filling) windows of observations.
        assert!(monitor.state_observation_count() <= (b + 1) * w);
    }

    #[test]
    fn event_log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("drift_events.jsonl");
        let event = DriftEvent {
            model_version: "m".into(),
            slices: vec![],
            score: 1.5,
            evidence: vec![("d".into(), "r1".into())],
            at_ms: 42,
        };
        append_event(&path, &event).unwrap();
        append_event(&path, &event).unwrap();
        let events = read_events(&path).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].score, 1.5);
        assert_eq!(events[1].evidence[0].1, "r1");
    }
}
