//! Evaluation metrics shared by the trainer, interaction retention and
//! drift monitoring.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Auc,
    Rmse,
    Accuracy,
}

impl MetricKind {
    pub fn parse(name: &str) -> Option<MetricKind> {
        match name.to_ascii_lowercase().as_str() {
            "auc" => Some(MetricKind::Auc),
            "rmse" => Some(MetricKind::Rmse),
            "accuracy" | "acc" => Some(MetricKind::Accuracy),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Auc => "auc",
            MetricKind::Rmse => "rmse",
            MetricKind::Accuracy => "accuracy",
        }
    }

    pub fn higher_is_better(&self) -> bool {
        !matches!(self, MetricKind::Rmse)
    }

    pub fn compute(&self, predictions: &[f64], labels: &[f64]) -> f64 {
        match self {
            MetricKind::Auc => auc(predictions, labels),
            MetricKind::Rmse => rmse(predictions, labels),
            MetricKind::Accuracy => accuracy(predictions, labels),
        }
    }

    /// Relative improvement of `with` over `without` in this metric's
    /// better direction.
    pub fn relative_improvement(&self, without: f64, with: f64) -> f64 {
        let denom = without.abs().max(1e-12);
        if self.higher_is_better() {
            (with - without) / denom
        } else {
            (without - with) / denom
        }
    }
}

pub fn rmse(predictions: &[f64], labels: &[f64]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let mse: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / predictions.len() as f64;
    mse.sqrt()
}

pub fn accuracy(predictions: &[f64], labels: &[f64]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| (**p >= 0.5) == (**y >= 0.5))
        .count();
    correct as f64 / predictions.len() as f64
}

/// ROC AUC by the rank statistic; ties get half credit. Degenerate inputs
/// (single class) return 0.5.
pub fn auc(predictions: &[f64], labels: &[f64]) -> f64 {
    let pos: Vec<f64> = predictions
        .iter()
        .zip(labels)
        .filter(|(_, y)| **y >= 0.5)
        .map(|(p, _)| *p)
        .collect();
    let neg: Vec<f64> = predictions
        .iter()
        .zip(labels)
        .filter(|(_, y)| **y < 0.5)
        .map(|(p, _)| *p)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}
