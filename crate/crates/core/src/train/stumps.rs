//! Boosted decision stumps: a deterministic, dependency-free ensemble for
//! nonlinear baselines.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left: f64,
    pub right: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StumpEnsemble {
    pub base: f64,
    pub shrinkage: f64,
    pub stumps: Vec<Stump>,
    /// Squash outputs through a sigmoid for classification targets.
    pub logistic: bool,
}

impl StumpEnsemble {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut score = self.base;
        for s in &self.stumps {
            let x = row.get(s.feature).copied().unwrap_or(f64::NAN);
            let v = if x.is_nan() || x <= s.threshold {
                s.left
            } else {
                s.right
            };
            score += self.shrinkage * v;
        }
        if self.logistic {
            1.0 / (1.0 + (-score).exp())
        } else {
            score
        }
    }
}

/// Gradient boosting on squared error with `rounds` stumps. Thresholds are
/// midpoints of consecutive distinct values; ties resolve to the lowest
/// feature index then lowest threshold, so fits are deterministic.
pub fn fit(
    rows: &[Vec<f64>],
    targets: &[f64],
    rounds: usize,
    shrinkage: f64,
    logistic: bool,
    deadline: Option<std::time::Instant>,
) -> (StumpEnsemble, bool) {
    let n = rows.len();
    let d = rows.first().map(Vec::len).unwrap_or(0);
    let base = targets.iter().sum::<f64>() / n.max(1) as f64;
    let mut ensemble = StumpEnsemble {
        base,
        shrinkage,
        stumps: Vec::new(),
        logistic: false, // raw scores during fitting
    };
    let mut capped = false;

    let mut residuals: Vec<f64> = targets.iter().map(|&y| y - base).collect();
    for _ in 0..rounds {
        if let Some(dl) = deadline {
            if std::time::Instant::now() >= dl {
                capped = true;
                break;
            }
        }
        let mut best: Option<(f64, Stump)> = None; // (sse, stump)
        for feature in 0..d {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                rows[a][feature]
                    .partial_cmp(&rows[b][feature])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let total: f64 = residuals.iter().sum();
            let mut left_sum = 0.0;
            let mut left_n = 0usize;
            for w in 0..n.saturating_sub(1) {
                let i = order[w];
                left_sum += residuals[i];
                left_n += 1;
                let a = rows[order[w]][feature];
                let b = rows[order[w + 1]][feature];
                if a.is_nan() || b.is_nan() || a == b {
                    continue;
                }
                let threshold = (a + b) / 2.0;
                let right_sum = total - left_sum;
                let right_n = n - left_n;
                let left_mean = left_sum / left_n as f64;
                let right_mean = right_sum / right_n.max(1) as f64;
                // SSE reduction is equivalent to maximizing the weighted
                // square of the two means.
                let gain =
                    left_mean * left_mean * left_n as f64 + right_mean * right_mean * right_n as f64;
                let candidate = Stump {
                    feature,
                    threshold,
                    left: left_mean,
                    right: right_mean,
                };
                let better = match &best {
                    None => true,
                    Some((bg, bs)) => {
                        gain > *bg
                            || (gain == *bg
                                && (feature, threshold) < (bs.feature, bs.threshold))
                    }
                };
                if better {
                    best = Some((gain, candidate));
                }
            }
        }
        let Some((_, stump)) = best else { break };
        for (i, r) in rows.iter().enumerate() {
            let x = r[stump.feature];
            let v = if x.is_nan() || x <= stump.threshold {
                stump.left
            } else {
                stump.right
            };
            residuals[i] -= shrinkage * v;
        }
        ensemble.stumps.push(stump);
    }
    ensemble.logistic = logistic;
    (ensemble, capped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_step_function() {
        let rows: Vec<Vec<f64>> = (0..60).map(|i| vec![i as f64]).collect();
        let targets: Vec<f64> = (0..60).map(|i| if i < 30 { 0.0 } else { 10.0 }).collect();
        let (model, _) = fit(&rows, &targets, 20, 0.5, false, None);
        for (r, &y) in rows.iter().zip(&targets) {
            assert!((model.predict(r) - y).abs() < 1.0);
        }
    }

    #[test]
    fn deterministic() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 7) as f64, (i % 11) as f64]).collect();
        let targets: Vec<f64> = rows.iter().map(|r| r[0] * r[1]).collect();
        let (a, _) = fit(&rows, &targets, 10, 0.3, false, None);
        let (b, _) = fit(&rows, &targets, 10, 0.3, false, None);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
