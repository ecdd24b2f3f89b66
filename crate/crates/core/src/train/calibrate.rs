//! Monotone score calibration: pool-adjacent-violators fitted onto a
//! piecewise-linear map over equal-frequency knots.

use serde::{Deserialize, Serialize};

pub const CALIBRATION_KNOTS: usize = 20;

/// Monotone non-decreasing piecewise-linear map. Inputs outside the knot
/// range clamp to the boundary values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    /// (score, calibrated) pairs with non-decreasing coordinates.
    pub knots: Vec<(f64, f64)>,
}

impl CalibrationMap {
    pub fn identity() -> Self {
        CalibrationMap {
            knots: vec![(0.0, 0.0), (1.0, 1.0)],
        }
    }

    pub fn apply(&self, score: f64) -> f64 {
        let k = &self.knots;
        if k.is_empty() {
            return score;
        }
        if score <= k[0].0 {
            return k[0].1;
        }
        if score >= k[k.len() - 1].0 {
            return k[k.len() - 1].1;
        }
        let idx = k.partition_point(|&(x, _)| x <= score);
        let (x0, y0) = k[idx - 1];
        let (x1, y1) = k[idx];
        if x1 == x0 {
            return y0;
        }
        y0 + (y1 - y0) * (score - x0) / (x1 - x0)
    }

    pub fn is_monotone(&self) -> bool {
        self.knots
            .windows(2)
            .all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1)
    }

    /// True when the map is the identity within `tol` at every knot.
    pub fn is_identity_within(&self, tol: f64) -> bool {
        self.knots.iter().all(|&(x, y)| (x - y).abs() <= tol)
    }
}

/// Isotonic regression by pool-adjacent-violators over (score, label)
/// pairs, then sampled at equal-frequency knots. Monotone by construction.
pub fn fit(scores: &[f64], labels: &[f64]) -> CalibrationMap {
    assert_eq!(scores.len(), labels.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then(a.cmp(&b))
    });

    // PAV: blocks of (weight, mean) merged while decreasing.
    struct Block {
        weight: f64,
        sum: f64,
        count: usize,
    }
    let mut blocks: Vec<Block> = Vec::new();
    for &i in &order {
        blocks.push(Block {
            weight: 1.0,
            sum: labels[i],
            count: 1,
        });
        while blocks.len() >= 2 {
            let last = blocks.len() - 1;
            let mean_last = blocks[last].sum / blocks[last].weight;
            let mean_prev = blocks[last - 1].sum / blocks[last - 1].weight;
            if mean_prev <= mean_last {
                break;
            }
            let b = blocks.pop().unwrap();
            let p = blocks.last_mut().unwrap();
            p.weight += b.weight;
            p.sum += b.sum;
            p.count += b.count;
        }
    }

    // Fitted values in score order.
    let mut fitted = Vec::with_capacity(order.len());
    for b in &blocks {
        let mean = b.sum / b.weight;
        for _ in 0..b.count {
            fitted.push(mean);
        }
    }

    let n = order.len();
    if n < 2 {
        return CalibrationMap::identity();
    }
    let mut knots = Vec::new();
    let steps = CALIBRATION_KNOTS.min(n);
    for j in 0..steps {
        let pos = if steps == 1 { 0 } else { j * (n - 1) / (steps - 1) };
        let x = scores[order[pos]];
        let y = fitted[pos];
        knots.push((x, y));
    }
    knots.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    // Enforce non-decreasing x (duplicate scores collapse).
    knots.dedup_by(|a, b| a.0 <= b.0 && {
        if a.0 == b.0 {
            b.1 = b.1.max(a.1);
            true
        } else {
            false
        }
    });
    if knots.len() < 2 {
        return CalibrationMap::identity();
    }
    CalibrationMap { knots }
}

/// Expected calibration error with 10 equal-width probability bins.
pub fn expected_calibration_error(scores: &[f64], labels: &[f64]) -> f64 {
    const BINS: usize = 10;
    let n = scores.len();
    if n == 0 {
        return 0.0;
    }
    let mut conf = [0.0f64; BINS];
    let mut acc = [0.0f64; BINS];
    let mut cnt = [0usize; BINS];
    for (&s, &y) in scores.iter().zip(labels) {
        let b = ((s * BINS as f64) as usize).min(BINS - 1);
        conf[b] += s;
        acc[b] += y;
        cnt[b] += 1;
    }
    let mut ece = 0.0;
    for b in 0..BINS {
        if cnt[b] == 0 {
            continue;
        }
        let w = cnt[b] as f64 / n as f64;
        ece += w * ((acc[b] / cnt[b] as f64) - (conf[b] / cnt[b] as f64)).abs();
    }
    ece
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfectly_calibrated_scores_fit_near_identity() {
        // labels equal scores exactly -> isotonic fit is the identity on
        // the knot scores.
        let scores: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let labels = scores.clone();
        let map = fit(&scores, &labels);
        assert!(map.is_monotone());
        assert!(map.is_identity_within(1e-6));
    }

    #[test]
    fn overconfident_scores_improve_after_calibration() {
        // Scores pushed toward the extremes; true probability is milder.
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..500 {
            let p_true = 0.3 + 0.4 * (i as f64 / 499.0);
            let s = if p_true > 0.5 {
                0.5 + (p_true - 0.5) * 2.0
            } else {
                0.5 - (0.5 - p_true) * 2.0
            };
            scores.push(s.clamp(0.0, 1.0));
            // Deterministic pseudo-labels matching p_true on average.
            labels.push(if (i * 7919) % 1000 < (p_true * 1000.0) as usize {
                1.0
            } else {
                0.0
            });
        }
        let before = expected_calibration_error(&scores, &labels);
        let map = fit(&scores, &labels);
        let calibrated: Vec<f64> = scores.iter().map(|&s| map.apply(s)).collect();
        let after = expected_calibration_error(&calibrated, &labels);
        assert!(map.is_monotone());
        assert!(after < before, "ECE {after} not below {before}");
    }

    #[test]
    fn monotone_at_every_knot() {
        let scores: Vec<f64> = (0..100).map(|i| (i % 13) as f64 / 13.0).collect();
        let labels: Vec<f64> = (0..100).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let map = fit(&scores, &labels);
        assert!(map.is_monotone());
    }
}
