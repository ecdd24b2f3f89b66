//! Interaction-candidate mining and retention.
//!
//! Candidates come from association signals (normalized mutual information
//! between a feature crossing and the target) and from residual structure
//! of a lightweight linear baseline. A candidate is retained only when
//! adding its crossing improves the task metric on every cross-validation
//! fold by at least the retention margin.

use serde::{Deserialize, Serialize};

use super::cmi;
use super::{ColumnData, FeatureError, FeatureView};
use crate::select::Segment;
use crate::train::linear::{self, FitOptions};
use crate::train::MetricKind;

/// Relative per-fold improvement required for retention (0.1%).
pub const RETENTION_DELTA: f64 = 1e-3;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InteractionCandidate {
    pub pair: (String, String),
    /// Normalized association strength in [0, 1].
    pub association: f64,
    /// Correlation between the crossing and baseline residuals, [-1, 1].
    pub error_lift: f64,
    pub retained: bool,
    /// Minimum fold improvement once evaluated.
    pub utility: Option<f64>,
    #[serde(default)]
    pub fold_improvements: Vec<f64>,
}

/// The crossing of two columns: product for numeric pairs, joint category
/// codes otherwise.
fn crossing(view: &FeatureView, a: &str, b: &str) -> Option<(Vec<f64>, bool)> {
    let ca = view.column(a)?;
    let cb = view.column(b)?;
    match (&ca.data, &cb.data) {
        (ColumnData::Numeric(va), ColumnData::Numeric(vb)) => Some((
            va.iter().zip(vb).map(|(x, y)| x * y).collect(),
            true,
        )),
        _ => {
            let codes = cmi::joint(&ca.data.binned(cmi::DEFAULT_BINS), &cb.data.binned(cmi::DEFAULT_BINS));
            Some((codes.iter().map(|&c| c as f64).collect(), false))
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Correlation ratio (eta): the share of residual variance explained by
/// crossing-group membership, in [0, 1].
fn correlation_ratio(groups: &[f64], residuals: &[f64]) -> f64 {
    use std::collections::HashMap;
    let n = residuals.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let grand = residuals.iter().sum::<f64>() / n;
    let mut by_group: HashMap<u64, (f64, usize)> = HashMap::new();
    for (g, r) in groups.iter().zip(residuals) {
        let e = by_group.entry(g.to_bits()).or_insert((0.0, 0));
        e.0 += r;
        e.1 += 1;
    }
    let ss_between: f64 = by_group
        .values()
        .map(|(sum, count)| {
            let mean = sum / *count as f64;
            *count as f64 * (mean - grand) * (mean - grand)
        })
        .sum();
    let ss_total: f64 = residuals.iter().map(|r| (r - grand) * (r - grand)).sum();
    if ss_total == 0.0 {
        return 0.0;
    }
    (ss_between / ss_total).sqrt().clamp(0.0, 1.0)
}

/// Normalized mutual information: I(X; Y) / sqrt(H(X) H(Y)), in [0, 1].
fn normalized_mi(x: &[u64], y: &[u64]) -> f64 {
    let hx = cmi::entropy(x);
    let hy = cmi::entropy(y);
    if hx <= 0.0 || hy <= 0.0 {
        return 0.0;
    }
    (cmi::mutual_information(x, y) / (hx * hy).sqrt()).clamp(0.0, 1.0)
}

/// Proposes the top-`q` feature pairs ranked by
/// `max(association, |error_lift|)`. `baseline_predictions` must align
/// with the view's train-segment rows.
pub fn propose_interactions(
    view: &FeatureView,
    baseline_predictions: &[f64],
    q: usize,
) -> Result<Vec<InteractionCandidate>, FeatureError> {
    if q == 0 {
        return Ok(Vec::new());
    }
    let train_rows = view.segment_rows(Segment::Train);
    if baseline_predictions.len() != train_rows.len() {
        return Err(FeatureError::BadEmbeddingSpec(format!(
            "baseline predictions ({}) must align with the train segment ({})",
            baseline_predictions.len(),
            train_rows.len()
        )));
    }
    let target_col = view
        .column(&view.target)
        .ok_or_else(|| FeatureError::UnknownColumn(view.target.clone()))?;
    let y_f64 = target_col.data.as_f64();
    let y_codes = target_col.data.binned(cmi::DEFAULT_BINS);
    let y_codes_train: Vec<u64> = train_rows.iter().map(|&r| y_codes[r]).collect();
    let residuals: Vec<f64> = train_rows
        .iter()
        .zip(baseline_predictions)
        .map(|(&r, p)| y_f64[r] - p)
        .collect();

    let features = view.feature_names();
    let mut candidates = Vec::new();
    for i in 0..features.len() {
        for j in (i + 1)..features.len() {
            let (cross, numeric) = crossing(view, &features[i], &features[j])
                .ok_or_else(|| FeatureError::UnknownColumn(features[i].clone()))?;
            let cross_train: Vec<f64> = train_rows.iter().map(|&r| cross[r]).collect();
            let cross_codes = cmi::equal_frequency_bins(&cross_train, cmi::DEFAULT_BINS);
            let association = normalized_mi(&cross_codes, &y_codes_train);
            let error_lift = if numeric {
                pearson(&cross_train, &residuals)
            } else {
                correlation_ratio(&cross_train, &residuals)
            };
            candidates.push(InteractionCandidate {
                pair: (features[i].clone(), features[j].clone()),
                association,
                error_lift,
                retained: false,
                utility: None,
                fold_improvements: Vec::new(),
            });
        }
    }
    candidates.sort_by(|a, b| {
        let ka = a.association.max(a.error_lift.abs());
        let kb = b.association.max(b.error_lift.abs());
        kb.total_cmp(&ka).then_with(|| a.pair.cmp(&b.pair))
    });
    candidates.truncate(q);
    Ok(candidates)
}

/// Evaluates candidates over `folds` cross-validation folds of the train
/// segment. A candidate is retained iff adding its crossing improves the
/// metric on every fold by at least `delta` (relative).
pub fn retain_interactions(
    mut candidates: Vec<InteractionCandidate>,
    view: &FeatureView,
    metric: MetricKind,
    folds: usize,
    delta: f64,
) -> Result<Vec<InteractionCandidate>, FeatureError> {
    let folds = folds.max(2);
    let train_rows = view.segment_rows(Segment::Train);
    let target_col = view
        .column(&view.target)
        .ok_or_else(|| FeatureError::UnknownColumn(view.target.clone()))?;
    let y = target_col.data.as_f64();
    let logistic = matches!(metric, MetricKind::Accuracy | MetricKind::Auc);
    let feature_names = view.feature_names();
    let base_matrix = view.matrix(&feature_names, &train_rows)?;
    let y_train: Vec<f64> = train_rows.iter().map(|&r| y[r]).collect();

    for cand in candidates.iter_mut() {
        let (cross, _) = crossing(view, &cand.pair.0, &cand.pair.1)
            .ok_or_else(|| FeatureError::UnknownColumn(cand.pair.0.clone()))?;
        let cross_train: Vec<f64> = train_rows.iter().map(|&r| cross[r]).collect();

        let mut improvements = Vec::with_capacity(folds);
        for fold in 0..folds {
            let holdout: Vec<usize> = (0..train_rows.len()).filter(|i| i % folds == fold).collect();
            let fit_rows: Vec<usize> = (0..train_rows.len()).filter(|i| i % folds != fold).collect();

            let x_fit: Vec<Vec<f64>> = fit_rows.iter().map(|&i| base_matrix[i].clone()).collect();
            let y_fit: Vec<f64> = fit_rows.iter().map(|&i| y_train[i]).collect();
            let x_hold: Vec<Vec<f64>> = holdout.iter().map(|&i| base_matrix[i].clone()).collect();
            let y_hold: Vec<f64> = holdout.iter().map(|&i| y_train[i]).collect();

            let (base_model, _) = linear::fit(&x_fit, &y_fit, FitOptions::baseline(logistic), None);
            let base_preds = base_model.predict_rows(&x_hold);
            let without = metric.compute(&base_preds, &y_hold);

            let x_fit_c: Vec<Vec<f64>> = fit_rows
                .iter()
                .map(|&i| {
                    let mut r = base_matrix[i].clone();
                    r.push(cross_train[i]);
                    r
                })
                .collect();
            let x_hold_c: Vec<Vec<f64>> = holdout
                .iter()
                .map(|&i| {
                    let mut r = base_matrix[i].clone();
                    r.push(cross_train[i]);
                    r
                })
                .collect();
            let (cross_model, _) = linear::fit(&x_fit_c, &y_fit, FitOptions::baseline(logistic), None);
            let cross_preds = cross_model.predict_rows(&x_hold_c);
            let with = metric.compute(&cross_preds, &y_hold);

            improvements.push(metric.relative_improvement(without, with));
        }
        let min_improvement = improvements.iter().copied().fold(f64::INFINITY, f64::min);
        cand.retained = improvements.iter().all(|&imp| imp >= delta);
        cand.utility = Some(min_improvement);
        cand.fold_improvements = improvements;
    }
    Ok(candidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::{Column, ColumnData, ColumnKind, FeatureView};
    use crate::select::Segment;
    use crate::util::splitmix64;

    fn numeric_view(cols: Vec<(&str, Vec<f64>)>, target: &str, n: usize) -> FeatureView {
        let columns = cols
            .into_iter()
            .map(|(name, data)| Column {
                name: name.to_string(),
                kind: ColumnKind::Numeric,
                transforms: vec!["identity".to_string()],
                data: ColumnData::Numeric(data),
            })
            .collect();
        FeatureView {
            id: "v".into(),
            working_set: "w".into(),
            target: target.to_string(),
            record_ids: (0..n).map(|i| format!("r{i}")).collect(),
            segments: vec![Segment::Train; n],
            columns,
        }
    }

    fn uniform(i: usize, salt: u64) -> f64 {
        (splitmix64(i as u64 ^ salt) >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn product_interaction_ranks_first_by_error_lift() {
        let n = 400;
        let x1: Vec<f64> = (0..n).map(|i| uniform(i, 1) * 2.0 - 1.0).collect();
        let x2: Vec<f64> = (0..n).map(|i| uniform(i, 2) * 2.0 - 1.0).collect();
        let x3: Vec<f64> = (0..n).map(|i| uniform(i, 3) * 2.0 - 1.0).collect();
        // y depends only on the product x1 * x2.
        let y: Vec<f64> = (0..n).map(|i| 3.0 * x1[i] * x2[i]).collect();
        let view = numeric_view(
            vec![
                ("y", y.clone()),
                ("x1", x1.clone()),
                ("x2", x2.clone()),
                ("x3", x3.clone()),
            ],
            "y",
            n,
        );
        // Linear baseline cannot capture the product: fit and take its
        // residual structure.
        let train_rows = view.segment_rows(Segment::Train);
        let x: Vec<Vec<f64>> = train_rows
            .iter()
            .map(|&i| vec![x1[i], x2[i], x3[i]])
            .collect();
        let (model, _) = linear::fit(&x, &y, FitOptions::baseline(false), None);
        let preds = model.predict_rows(&x);
        let candidates = propose_interactions(&view, &preds, 3).unwrap();
        assert_eq!(
            candidates[0].pair,
            ("x1".to_string(), "x2".to_string()),
            "got {candidates:?}"
        );
        assert!(candidates[0].error_lift.abs() > 0.5);
    }

    #[test]
    fn independent_features_stay_below_permutation_floor() {
        let n = 600;
        let x1: Vec<f64> = (0..n).map(|i| uniform(i, 10)).collect();
        let x2: Vec<f64> = (0..n).map(|i| uniform(i, 20)).collect();
        let y: Vec<f64> = (0..n).map(|i| uniform(i, 30)).collect();
        let view = numeric_view(
            vec![("y", y.clone()), ("x1", x1.clone()), ("x2", x2.clone())],
            "y",
            n,
        );
        let preds = vec![0.5; n];
        let candidates = propose_interactions(&view, &preds, 1).unwrap();

        // Permutation null: shuffle y deterministically and take the max
        // association over trials as the noise floor.
        let mut floor = 0.0f64;
        for trial in 0..20u64 {
            let mut perm: Vec<usize> = (0..n).collect();
            // Fisher–Yates with a splitmix stream.
            let mut state = trial.wrapping_mul(0x9e37_79b9_7f4a_7c15) + 1;
            for i in (1..n).rev() {
                state = splitmix64(state);
                let j = (state % (i as u64 + 1)) as usize;
                perm.swap(i, j);
            }
            let y_perm: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let view_perm = numeric_view(
                vec![("y", y_perm), ("x1", x1.clone()), ("x2", x2.clone())],
                "y",
                n,
            );
            let c = propose_interactions(&view_perm, &preds, 1).unwrap();
            floor = floor.max(c[0].association);
        }
        assert!(
            candidates[0].association <= floor * 1.5 + 0.05,
            "association {} above permutation floor {floor}",
            candidates[0].association
        );
    }

    #[test]
    fn zero_q_returns_empty() {
        let view = numeric_view(vec![("y", vec![0.0, 1.0]), ("x", vec![1.0, 2.0])], "y", 2);
        assert!(propose_interactions(&view, &[0.0, 0.0], 0).unwrap().is_empty());
    }

    #[test]
    fn retention_requires_improvement_on_every_fold() {
        let n = 400;
        let x1: Vec<f64> = (0..n).map(|i| uniform(i, 5) * 2.0 - 1.0).collect();
        let x2: Vec<f64> = (0..n).map(|i| uniform(i, 6) * 2.0 - 1.0).collect();
        let y: Vec<f64> = (0..n).map(|i| x1[i] * x2[i]).collect();
        let noise: Vec<f64> = (0..n).map(|i| uniform(i, 7)).collect();
        let view = numeric_view(
            vec![("y", y), ("x1", x1), ("x2", x2), ("noise", noise)],
            "y",
            n,
        );
        let candidates = vec![
            InteractionCandidate {
                pair: ("x1".into(), "x2".into()),
                association: 0.5,
                error_lift: 0.8,
                retained: false,
                utility: None,
                fold_improvements: Vec::new(),
            },
            InteractionCandidate {
                pair: ("x1".into(), "noise".into()),
                association: 0.01,
                error_lift: 0.0,
                retained: false,
                utility: None,
                fold_improvements: Vec::new(),
            },
        ];
        let evaluated =
            retain_interactions(candidates, &view, MetricKind::Rmse, 2, RETENTION_DELTA).unwrap();
        let signal = &evaluated[0];
        assert!(signal.retained, "true interaction not retained: {signal:?}");
        // Retention soundness: every recorded fold improvement clears the
        // margin.
        assert!(signal
            .fold_improvements
            .iter()
            .all(|&imp| imp >= RETENTION_DELTA));
        assert_eq!(signal.utility,
            Some(
                signal
                    .fold_improvements
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min)
            )
        );
        let noise_cand = &evaluated[1];
        assert!(!noise_cand.retained, "noise interaction retained: {noise_cand:?}");
    }

    #[test]
    fn empty_candidates_stay_empty() {
        let view = numeric_view(vec![("y", vec![0.0, 1.0, 0.0, 1.0]), ("x", vec![1.0, 2.0, 3.0, 4.0])], "y", 4);
        let out = retain_interactions(Vec::new(), &view, MetricKind::Rmse, 2, RETENTION_DELTA).unwrap();
        assert!(out.is_empty());
    }
}
