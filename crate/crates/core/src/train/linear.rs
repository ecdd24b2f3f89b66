//! Regularized linear and logistic baselines: deterministic full-batch
//! gradient descent over standardized features.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub logistic: bool,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl LinearModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut z = self.bias;
        for i in 0..self.weights.len() {
            let x = if row[i].is_nan() { 0.0 } else { row[i] };
            z += self.weights[i] * (x - self.means[i]) / self.stds[i];
        }
        if self.logistic {
            sigmoid(z)
        } else {
            z
        }
    }

    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| self.predict(r)).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub logistic: bool,
    pub l2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub deadline: Option<std::time::Instant>,
}

impl FitOptions {
    pub fn baseline(logistic: bool) -> Self {
        FitOptions {
            logistic,
            l2: 1e-3,
            learning_rate: 0.5,
            epochs: 300,
            deadline: None,
        }
    }
}

/// Fits by full-batch gradient descent from a zero (or warm) start.
/// Returns the model and whether the deadline cut the run short.
pub fn fit(
    rows: &[Vec<f64>],
    targets: &[f64],
    options: FitOptions,
    warm: Option<&LinearModel>,
) -> (LinearModel, bool) {
    assert_eq!(rows.len(), targets.len());
    let n = rows.len();
    let d = rows.first().map(Vec::len).unwrap_or(0);

    // Standardization over the training rows (NaN treated as 0 after
    // centering, i.e. mean imputation).
    let (means, stds) = match warm {
        Some(m) => (m.means.clone(), m.stds.clone()),
        None => {
            let mut means = vec![0.0f64; d];
            let mut counts = vec![0usize; d];
            for r in rows {
                for j in 0..d {
                    if !r[j].is_nan() {
                        means[j] += r[j];
                        counts[j] += 1;
                    }
                }
            }
            for j in 0..d {
                if counts[j] > 0 {
                    means[j] /= counts[j] as f64;
                }
            }
            let mut vars = vec![0.0f64; d];
            for r in rows {
                for j in 0..d {
                    if !r[j].is_nan() {
                        let diff = r[j] - means[j];
                        vars[j] += diff * diff;
                    }
                }
            }
            let stds = vars
                .iter()
                .zip(&counts)
                .map(|(v, &c)| {
                    if c > 1 {
                        (v / c as f64).sqrt().max(1e-9)
                    } else {
                        1.0
                    }
                })
                .collect();
            (means, stds)
        }
    };

    let std_rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            (0..d)
                .map(|j| {
                    let x = if r[j].is_nan() { means[j] } else { r[j] };
                    (x - means[j]) / stds[j]
                })
                .collect()
        })
        .collect();

    let mut weights = warm.map(|m| m.weights.clone()).unwrap_or_else(|| vec![0.0; d]);
    let mut bias = warm.map(|m| m.bias).unwrap_or(0.0);
    let mut capped = false;

    for _ in 0..options.epochs {
        if let Some(deadline) = options.deadline {
            if std::time::Instant::now() >= deadline {
                capped = true;
                break;
            }
        }
        let mut grad_w = vec![0.0f64; d];
        let mut grad_b = 0.0f64;
        for (r, &y) in std_rows.iter().zip(targets) {
            let mut z = bias;
            for j in 0..d {
                z += weights[j] * r[j];
            }
            let err = if options.logistic {
                sigmoid(z) - y
            } else {
                z - y
            };
            for j in 0..d {
                grad_w[j] += err * r[j];
            }
            grad_b += err;
        }
        let scale = options.learning_rate / n.max(1) as f64;
        for j in 0..d {
            weights[j] -= scale * (grad_w[j] + options.l2 * weights[j] * n as f64);
        }
        bias -= scale * grad_b;
    }

    (
        LinearModel {
            weights,
            bias,
            logistic: options.logistic,
            means,
            stds,
        },
        capped,
    )
}
