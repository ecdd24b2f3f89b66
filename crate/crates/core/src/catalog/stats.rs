//! Per-column online statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{FieldKind, Value};
use crate::util::fnv1a64;

/// Exact below this many distincts; KMV-estimated above.
pub const DISTINCT_EXACT_LIMIT: usize = 4096;

/// Distinct-count sketch: keeps the `k` smallest 64-bit value hashes.
/// Exact while fewer than `k` distinct hashes have been seen; above that it
/// is a KMV estimator with relative standard error about `1/sqrt(k - 2)`
/// (~1.6% at k = 4096). Merging is hash-set union followed by trimming, so
/// incremental maintenance and recomputation from scratch agree exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinctSketch {
    k: usize,
    hashes: std::collections::BTreeSet<u64>,
    saturated: bool,
}

impl DistinctSketch {
    pub fn new() -> Self {
        DistinctSketch {
            k: DISTINCT_EXACT_LIMIT,
            hashes: Default::default(),
            saturated: false,
        }
    }

    pub fn observe_bytes(&mut self, bytes: &[u8]) {
        self.observe_hash(fnv1a64(bytes));
    }

    fn observe_hash(&mut self, h: u64) {
        self.hashes.insert(h);
        if self.hashes.len() > self.k {
            let max = *self.hashes.iter().next_back().unwrap();
            self.hashes.remove(&max);
            self.saturated = true;
        }
    }

    pub fn merge(&mut self, other: &DistinctSketch) {
        self.saturated |= other.saturated;
        for &h in &other.hashes {
            self.observe_hash(h);
        }
    }

    pub fn estimate(&self) -> u64 {
        if !self.saturated {
            return self.hashes.len() as u64;
        }
        let kth = *self.hashes.iter().next_back().unwrap();
        let frac = kth as f64 / u64::MAX as f64;
        ((self.k as f64 - 1.0) / frac).round() as u64
    }
}

impl Default for DistinctSketch {
    fn default() -> Self {
        Self::new()
    }
}

/// Online statistics for one column.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ColumnStats {
    pub field: String,
    kind_name: String,
    rows: u64,
    nulls: u64,
    distinct: DistinctSketch,
    min: Option<f64>,
    max: Option<f64>,
    label_freq: BTreeMap<String, u64>,
}

impl ColumnStats {
    pub fn new(field: &str, kind: &FieldKind) -> Self {
        ColumnStats {
            field: field.to_string(),
            kind_name: kind.name().to_string(),
            rows: 0,
            nulls: 0,
            distinct: DistinctSketch::new(),
            min: None,
            max: None,
            label_freq: BTreeMap::new(),
        }
    }

    pub fn observe(&mut self, value: &Value) {
        self.rows += 1;
        if value.is_null() {
            self.nulls += 1;
            return;
        }
        let mut buf = Vec::new();
        value.canonical_bytes(&mut buf);
        self.distinct.observe_bytes(&buf);
        match value {
            Value::Number(n) => {
                self.min = Some(self.min.map_or(*n, |m| m.min(*n)));
                self.max = Some(self.max.map_or(*n, |m| m.max(*n)));
            }
            Value::Labels(labels) => {
                for l in labels {
                    *self.label_freq.entry(l.clone()).or_insert(0) += 1;
                }
            }
            _ => {}
        }
    }

    pub fn merge(&mut self, other: &ColumnStats) {
        self.rows += other.rows;
        self.nulls += other.nulls;
        self.distinct.merge(&other.distinct);
        self.min = match (self.min, other.min) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.max = match (self.max, other.max) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        for (l, c) in &other.label_freq {
            *self.label_freq.entry(l.clone()).or_insert(0) += c;
        }
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn null_fraction(&self) -> f64 {
        if self.rows == 0 {
            0.0
        } else {
            self.nulls as f64 / self.rows as f64
        }
    }

    pub fn distinct_estimate(&self) -> u64 {
        self.distinct.estimate()
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        match (self.min, self.max) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        }
    }

    /// Label frequencies, highest first (ties by label), truncated to `n`.
    pub fn top_labels(&self, n: usize) -> Vec<(String, u64)> {
        let mut v: Vec<(String, u64)> = self
            .label_freq
            .iter()
            .map(|(l, c)| (l.clone(), *c))
            .collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v.truncate(n);
        v
    }

    /// All labels ever observed for this column.
    pub fn labels(&self) -> impl Iterator<Item = &String> {
        self.label_freq.keys()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_exact_below_limit() {
        let mut sk = DistinctSketch::new();
        for i in 0..1000u32 {
            sk.observe_bytes(&i.to_le_bytes());
        }
        assert_eq!(sk.estimate(), 1000);
        // Repeats do not change the estimate.
        for i in 0..1000u32 {
            sk.observe_bytes(&i.to_le_bytes());
        }
        assert_eq!(sk.estimate(), 1000);
    }

    #[test]
    fn distinct_estimate_above_limit() {
        let mut sk = DistinctSketch::new();
        let n = 50_000u32;
        for i in 0..n {
            sk.observe_bytes(&i.to_le_bytes());
        }
        let est = sk.estimate() as f64;
        let err = (est - n as f64).abs() / n as f64;
        assert!(err < 0.10, "estimate {est} off by {err}");
    }

    #[test]
    fn distinct_merge_equals_scratch() {
        let mut all = DistinctSketch::new();
        let mut a = DistinctSketch::new();
        let mut b = DistinctSketch::new();
        for i in 0..9000u32 {
            all.observe_bytes(&i.to_le_bytes());
            if i % 2 == 0 {
                a.observe_bytes(&i.to_le_bytes());
            } else {
                b.observe_bytes(&i.to_le_bytes());
            }
        }
        a.merge(&b);
        assert_eq!(a.estimate(), all.estimate());
    }

    #[test]
    fn top_labels_ordering() {
        let mut st = ColumnStats::new("tags", &FieldKind::LabelSet);
        st.observe(&Value::Labels(vec!["a".into(), "b".into()]));
        st.observe(&Value::Labels(vec!["b".into()]));
        st.observe(&Value::Labels(vec!["c".into()]));
        assert_eq!(
            st.top_labels(2),
            vec![("b".to_string(), 2), ("a".to_string(), 1)]
        );
    }
}
