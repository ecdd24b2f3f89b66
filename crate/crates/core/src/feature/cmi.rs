//! Entropy, mutual information and conditional mutual information on
//! binned data, plus greedy CMI feature selection.
//!
//! Two estimator layers: the plug-in estimator (exact on fully enumerated
//! joints) and a Miller–Madow corrected variant used for selection gains.

use std::collections::HashMap;

use thiserror::Error;

pub const DEFAULT_BINS: usize = 8;
pub const DEFAULT_GAIN_EPSILON: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum CmiError {
    #[error("target is constant; nothing to select against")]
    DegenerateTarget,
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("budget {0} exceeds column count {1}")]
    BudgetTooLarge(usize, usize),
}

/// Equal-frequency binning into at most `bins` codes; NaN gets its own
/// code `bins`.
pub fn equal_frequency_bins(values: &[f64], bins: usize) -> Vec<u64> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let mut edges = Vec::new();
    if m > 0 {
        for j in 1..bins {
            let idx = (j * m) / bins;
            if idx < m {
                edges.push(sorted[idx]);
            }
        }
        edges.dedup_by(|a, b| a == b);
    }
    values
        .iter()
        .map(|&v| {
            if v.is_nan() {
                bins as u64
            } else {
                edges.partition_point(|&e| e <= v) as u64
            }
        })
        .collect()
}

fn counts(codes: &[u64]) -> HashMap<u64, usize> {
    let mut map = HashMap::new();
    for &c in codes {
        *map.entry(c).or_insert(0) += 1;
    }
    map
}

/// Plug-in entropy in nats.
pub fn entropy(codes: &[u64]) -> f64 {
    let n = codes.len();
    if n == 0 {
        return 0.0;
    }
    counts(codes)
        .values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Miller–Madow corrected entropy: plug-in plus `(m - 1) / (2n)` where `m`
/// is the number of occupied cells.
pub fn entropy_corrected(codes: &[u64]) -> f64 {
    let n = codes.len();
    if n == 0 {
        return 0.0;
    }
    let occupied = counts(codes).len();
    entropy(codes) + (occupied.saturating_sub(1)) as f64 / (2.0 * n as f64)
}

/// Dense joint coding of two code vectors.
pub fn joint(a: &[u64], b: &[u64]) -> Vec<u64> {
    let mut dict: HashMap<(u64, u64), u64> = HashMap::new();
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let next = dict.len() as u64;
        let code = *dict.entry((x, y)).or_insert(next);
        out.push(code);
    }
    out
}

/// Plug-in mutual information I(X; Y) in nats. Exact (within float
/// arithmetic) on a fully enumerated joint distribution.
pub fn mutual_information(x: &[u64], y: &[u64]) -> f64 {
    entropy(x) + entropy(y) - entropy(&joint(x, y))
}

/// Plug-in conditional mutual information I(X; Y | S).
pub fn conditional_mutual_information(x: &[u64], y: &[u64], s: Option<&[u64]>) -> f64 {
    match s {
        None => mutual_information(x, y),
        Some(s) => {
            entropy(&joint(x, s)) + entropy(&joint(y, s)) - entropy(&joint(&joint(x, y), s))
                - entropy(s)
        }
    }
}

/// Miller–Madow corrected I(X; Y | S), the selection-time gain estimate.
pub fn cmi_corrected(x: &[u64], y: &[u64], s: Option<&[u64]>) -> f64 {
    match s {
        None => entropy_corrected(x) + entropy_corrected(y) - entropy_corrected(&joint(x, y)),
        Some(s) => {
            entropy_corrected(&joint(x, s)) + entropy_corrected(&joint(y, s))
                - entropy_corrected(&joint(&joint(x, y), s))
                - entropy_corrected(s)
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SelectedFeature {
    pub name: String,
    pub index: usize,
    /// Estimated conditional information gain at selection time (nats).
    pub gain: f64,
}

/// Wilson–Hilferty chi-square quantile approximation at `z` standard
/// normal deviations.
fn chi2_quantile(dof: f64, z: f64) -> f64 {
    let k = dof.max(1.0);
    let t = 1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt();
    k * t * t * t
}

/// Statistical noise floor for a plug-in (conditional) MI estimate: the
/// chi-square null `2n * I ~ chi2(dof)` at ~3.5 sigma, expressed in nats.
/// Gains below the floor are indistinguishable from independence at the
/// sample size, regardless of the configured epsilon.
fn estimation_noise_floor(x_cells: usize, y_cells: usize, s_cells: usize, n: usize) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    let dof = ((x_cells.saturating_sub(1)) * (y_cells.saturating_sub(1))).max(1)
        * s_cells.max(1);
    chi2_quantile(dof as f64, 3.5) / (2.0 * n as f64)
}

fn cell_count(codes: &[u64]) -> usize {
    counts(codes).len()
}

/// Greedy forward selection maximizing the corrected conditional mutual
/// information against the already-selected set, with deterministic ties
/// (column order) and early stop at `epsilon` nats.
///
/// Purely synergistic signals (no single feature carries information, a
/// pair does) would stall a singleton-only greedy at step one, so when the
/// best singleton gain falls below `epsilon` the search probes feature
/// pairs and admits the best pair whose joint gain clears `2 * epsilon`.
pub fn select_features_cmi(
    columns: &[(String, Vec<u64>)],
    target: &[u64],
    budget: usize,
    epsilon: f64,
) -> Result<Vec<SelectedFeature>, CmiError> {
    if counts(target).len() < 2 {
        return Err(CmiError::DegenerateTarget);
    }
    if budget > columns.len() {
        return Err(CmiError::BudgetTooLarge(budget, columns.len()));
    }
    let n = target.len();
    let y_cells = cell_count(target);
    let mut selected: Vec<SelectedFeature> = Vec::new();
    let mut in_set = vec![false; columns.len()];
    let mut conditioning: Option<Vec<u64>> = None;

    while selected.len() < budget {
        let s_cells = conditioning.as_deref().map(cell_count).unwrap_or(1);
        // Best singleton gain above both the configured epsilon and the
        // sample-size noise floor.
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, (_, codes)) in columns.iter().enumerate() {
            if in_set[i] {
                continue;
            }
            let gain = cmi_corrected(codes, target, conditioning.as_deref());
            let floor = estimation_noise_floor(cell_count(codes), y_cells, s_cells, n);
            match best {
                None => best = Some((i, gain, floor)),
                Some((_, bg, _)) if gain > bg => best = Some((i, gain, floor)),
                _ => {}
            }
        }
        match best {
            Some((i, gain, floor)) if gain > epsilon.max(floor) => {
                conditioning = Some(match conditioning {
                    None => columns[i].1.clone(),
                    Some(s) => joint(&s, &columns[i].1),
                });
                in_set[i] = true;
                selected.push(SelectedFeature {
                    name: columns[i].0.clone(),
                    index: i,
                    gain,
                });
                continue;
            }
            _ => {}
        }
        // Singleton gains exhausted: probe pairs for synergy if the budget
        // has room for both.
        if selected.len() + 2 > budget {
            break;
        }
        let mut best_pair: Option<(usize, usize, f64, f64)> = None;
        for i in 0..columns.len() {
            if in_set[i] {
                continue;
            }
            for j in (i + 1)..columns.len() {
                if in_set[j] {
                    continue;
                }
                let pair_codes = joint(&columns[i].1, &columns[j].1);
                let gain = cmi_corrected(&pair_codes, target, conditioning.as_deref());
                let floor =
                    estimation_noise_floor(cell_count(&pair_codes), y_cells, s_cells, n);
                match best_pair {
                    None => best_pair = Some((i, j, gain, floor)),
                    Some((_, _, bg, _)) if gain > bg => best_pair = Some((i, j, gain, floor)),
                    _ => {}
                }
            }
        }
        let Some((i, j, pair_gain, pair_floor)) = best_pair else { break };
        if pair_gain <= (2.0 * epsilon).max(pair_floor) {
            break;
        }
        // Admit both; the second's gain is conditional on the first.
        conditioning = Some(match conditioning {
            None => columns[i].1.clone(),
            Some(s) => joint(&s, &columns[i].1),
        });
        in_set[i] = true;
        selected.push(SelectedFeature {
            name: columns[i].0.clone(),
            index: i,
            gain: pair_gain,
        });
        let j_gain = cmi_corrected(&columns[j].1, target, conditioning.as_deref());
        conditioning = Some(joint(conditioning.as_ref().unwrap(), &columns[j].1));
        in_set[j] = true;
        selected.push(SelectedFeature {
            name: columns[j].0.clone(),
            index: j,
            gain: j_gain,
        });
    }
    Ok(selected)
}
