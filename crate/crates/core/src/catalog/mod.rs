//! Dataset catalog: schemas, partitioned records and online statistics.
//!
//! Datasets are registered with a [`DatasetDescriptor`], ingested as
//! batches of [`Record`]s and queried for per-column statistics and
//! predicate selectivity. Statistics are maintained incrementally per
//! (dataset, tenant) and are exactly recomputable from the stored rows;
//! merged views across tenants are produced on demand.

mod ndjson;
mod stats;

pub use ndjson::{read_records, read_schema, write_records, write_schema, FormatError};
pub use stats::{ColumnStats, DistinctSketch};

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::fnv1a64;

pub const EXACT_SELECTIVITY_ROWS: usize = 10_000;
pub const RESERVOIR_CAPACITY: usize = 4096;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("dataset `{0}` is already registered")]
    DuplicateDataset(String),
    #[error("dataset `{0}` is not registered")]
    UnknownDataset(String),
    #[error("duplicate field `{0}` in schema")]
    DuplicateField(String),
    #[error("schema declares more than one vector field (`{0}` and `{1}`)")]
    MultipleVectorFields(String, String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("field `{field}` has kind {actual}, expected {expected}")]
    KindMismatch {
        field: String,
        expected: String,
        actual: String,
    },
}

/// Kind of a schema field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    Numeric,
    Categorical,
    Text,
    Vector { dim: usize },
    LabelSet,
}

impl FieldKind {
    pub fn name(&self) -> &'static str {
        match self {
            FieldKind::Numeric => "numeric",
            FieldKind::Categorical => "categorical",
            FieldKind::Text => "text",
            FieldKind::Vector { .. } => "vector",
            FieldKind::LabelSet => "label-set",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    pub kind: FieldKind,
}

/// Time bucket granularity for partitioning. Daily unless stated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeGranularity {
    Hourly,
    #[default]
    Daily,
    Weekly,
}

impl TimeGranularity {
    /// Bucket index for an epoch-milliseconds timestamp.
    pub fn bucket(&self, ts_ms: i64) -> i64 {
        let hour = 3_600_000i64;
        match self {
            TimeGranularity::Hourly => ts_ms.div_euclid(hour),
            TimeGranularity::Daily => ts_ms.div_euclid(24 * hour),
            TimeGranularity::Weekly => ts_ms.div_euclid(7 * 24 * hour),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartitionSpec {
    /// Tenant assigned to records that do not carry one.
    pub default_tenant: String,
    pub granularity: TimeGranularity,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            default_tenant: "default".to_string(),
            granularity: TimeGranularity::Daily,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: String,
    pub schema: Vec<FieldDef>,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub row_count: u64,
}

impl DatasetDescriptor {
    pub fn new(dataset_id: impl Into<String>, schema: Vec<FieldDef>) -> Self {
        DatasetDescriptor {
            dataset_id: dataset_id.into(),
            schema,
            partition: PartitionSpec::default(),
            row_count: 0,
        }
    }

    pub fn field(&self, name: &str) -> Option<&FieldDef> {
        self.schema.iter().find(|f| f.name == name)
    }

    pub fn vector_field(&self) -> Option<&FieldDef> {
        self.schema
            .iter()
            .find(|f| matches!(f.kind, FieldKind::Vector { .. }))
    }

    fn validate(&self) -> Result<(), CatalogError> {
        let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
        let mut vector: Option<&str> = None;
        for f in &self.schema {
            if seen.insert(f.name.as_str(), ()).is_some() {
                return Err(CatalogError::DuplicateField(f.name.clone()));
            }
            if matches!(f.kind, FieldKind::Vector { .. }) {
                if let Some(first) = vector {
                    return Err(CatalogError::MultipleVectorFields(
                        first.to_string(),
                        f.name.clone(),
                    ));
                }
                vector = Some(&f.name);
            }
        }
        Ok(())
    }
}

/// A field value. Missing values are explicit `Null`s, never absent keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Number(f64),
    Text(String),
    Vector(Vec<f32>),
    Labels(Vec<String>),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_vector(&self) -> Option<&[f32]> {
        match self {
            Value::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_labels(&self) -> Option<&[String]> {
        match self {
            Value::Labels(l) => Some(l),
            _ => None,
        }
    }

    fn conforms(&self, kind: &FieldKind) -> bool {
        match (self, kind) {
            (Value::Null, _) => true,
            (Value::Number(_), FieldKind::Numeric) => true,
            (Value::Text(_), FieldKind::Categorical | FieldKind::Text) => true,
            (Value::Vector(v), FieldKind::Vector { dim }) => v.len() == *dim,
            (Value::Labels(_), FieldKind::LabelSet) => true,
            _ => false,
        }
    }

    /// Stable byte encoding used for duplicate hashing and stats.
    pub fn canonical_bytes(&self, out: &mut Vec<u8>) {
        match self {
            Value::Null => out.push(0),
            Value::Number(n) => {
                out.push(1);
                out.extend_from_slice(&n.to_bits().to_le_bytes());
            }
            Value::Text(t) => {
                out.push(2);
                out.extend_from_slice(t.as_bytes());
            }
            Value::Vector(v) => {
                out.push(3);
                for x in v {
                    out.extend_from_slice(&x.to_bits().to_le_bytes());
                }
            }
            Value::Labels(l) => {
                out.push(4);
                let mut sorted: Vec<&String> = l.iter().collect();
                sorted.sort();
                for s in sorted {
                    out.extend_from_slice(s.as_bytes());
                    out.push(0xff);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub record_id: String,
    pub tenant: String,
    /// Epoch milliseconds.
    pub timestamp: i64,
    pub values: BTreeMap<String, Value>,
}

impl Record {
    pub fn new(record_id: impl Into<String>) -> Self {
        Record {
            record_id: record_id.into(),
            tenant: String::new(),
            timestamp: 0,
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, field: impl Into<String>, value: Value) -> Self {
        self.values.insert(field.into(), value);
        self
    }

    pub fn tenant(mut self, tenant: impl Into<String>) -> Self {
        self.tenant = tenant.into();
        self
    }

    pub fn at(mut self, ts_ms: i64) -> Self {
        self.timestamp = ts_ms;
        self
    }

    /// Hash of the record's field values (not its id), for exact-duplicate
    /// detection.
    pub fn content_hash(&self) -> u64 {
        let mut buf = Vec::new();
        for (k, v) in &self.values {
            buf.extend_from_slice(k.as_bytes());
            buf.push(0xfe);
            v.canonical_bytes(&mut buf);
        }
        fnv1a64(&buf)
    }
}

/// Why a record was rejected during ingest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "reason", content = "detail")]
pub enum RejectReason {
    Duplicate,
    EmptyId,
    UnknownField(String),
    KindMismatch(String),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    #[serde(default)]
    pub accepted_ids: Vec<String>,
    pub rejected: Vec<(String, RejectReason)>,
}

/// Label predicate mode: match any of the labels, or all of them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Any,
    All,
}

/// Uniform row sample (algorithm R) used for selectivity estimation on
/// datasets above the exact-scan limit. Deterministic given ingest order.
#[derive(Clone, Debug)]
struct Reservoir {
    capacity: usize,
    seen: u64,
    rows: Vec<usize>, // indices into Dataset::records
    state: u64,
}

impl Reservoir {
    fn new(capacity: usize, seed: u64) -> Self {
        Reservoir {
            capacity,
            seen: 0,
            rows: Vec::new(),
            state: crate::util::splitmix64(seed ^ 0x7265_7376),
        }
    }

    fn next_u64(&mut self) -> u64 {
        self.state = crate::util::splitmix64(self.state);
        self.state
    }

    fn offer(&mut self, row: usize) {
        self.seen += 1;
        if self.rows.len() < self.capacity {
            self.rows.push(row);
            return;
        }
        let j = self.next_u64() % self.seen;
        if (j as usize) < self.capacity {
            self.rows[j as usize] = row;
        }
    }
}

/// One registered dataset: descriptor, rows and per-tenant statistics.
#[derive(Debug)]
pub struct Dataset {
    descriptor: DatasetDescriptor,
    records: Vec<Record>,
    by_id: HashMap<String, usize>,
    tombstones: Vec<bool>,
    per_tenant: BTreeMap<String, BTreeMap<String, ColumnStats>>,
    reservoir: Reservoir,
}

impl Dataset {
    fn new(descriptor: DatasetDescriptor) -> Self {
        let seed = fnv1a64(descriptor.dataset_id.as_bytes());
        Dataset {
            descriptor,
            records: Vec::new(),
            by_id: HashMap::new(),
            tombstones: Vec::new(),
            per_tenant: BTreeMap::new(),
            reservoir: Reservoir::new(RESERVOIR_CAPACITY, seed),
        }
    }

    pub fn descriptor(&self) -> &DatasetDescriptor {
        &self.descriptor
    }

    pub fn row_count(&self) -> u64 {
        self.descriptor.row_count
    }

    pub fn live_records(&self) -> impl Iterator<Item = &Record> {
        self.records
            .iter()
            .zip(self.tombstones.iter())
            .filter(|(_, dead)| !**dead)
            .map(|(r, _)| r)
    }

    pub fn record(&self, record_id: &str) -> Option<&Record> {
        let idx = *self.by_id.get(record_id)?;
        if self.tombstones[idx] {
            None
        } else {
            Some(&self.records[idx])
        }
    }

    /// Tombstones a record. Stats keep counting it; only reads hide it.
    pub fn tombstone(&mut self, record_id: &str) -> bool {
        match self.by_id.get(record_id) {
            Some(&idx) if !self.tombstones[idx] => {
                self.tombstones[idx] = true;
                true
            }
            _ => false,
        }
    }

    pub fn ingest(&mut self, records: Vec<Record>) -> IngestReport {
        let mut report = IngestReport::default();
        for mut record in records {
            if record.record_id.is_empty() {
                report
                    .rejected
                    .push((String::new(), RejectReason::EmptyId));
                continue;
            }
            if self.by_id.contains_key(&record.record_id) {
                report
                    .rejected
                    .push((record.record_id.clone(), RejectReason::Duplicate));
                continue;
            }
            if record.tenant.is_empty() {
                record.tenant = self.descriptor.partition.default_tenant.clone();
            }
            if let Some(reason) = self.validate_record(&record) {
                report.rejected.push((record.record_id.clone(), reason));
                continue;
            }
            // Absent fields become explicit nulls.
            for f in &self.descriptor.schema {
                record
                    .values
                    .entry(f.name.clone())
                    .or_insert(Value::Null);
            }
            let idx = self.records.len();
            self.by_id.insert(record.record_id.clone(), idx);
            self.update_stats(&record);
            report.accepted_ids.push(record.record_id.clone());
            self.records.push(record);
            self.tombstones.push(false);
            self.reservoir.offer(idx);
            self.descriptor.row_count += 1;
            report.accepted += 1;
        }
        report
    }

    fn validate_record(&self, record: &Record) -> Option<RejectReason> {
        for (name, value) in &record.values {
            let Some(field) = self.descriptor.field(name) else {
                return Some(RejectReason::UnknownField(name.clone()));
            };
            if !value.conforms(&field.kind) {
                return Some(RejectReason::KindMismatch(name.clone()));
            }
        }
        None
    }

    fn update_stats(&mut self, record: &Record) {
        let tenant_stats = self
            .per_tenant
            .entry(record.tenant.clone())
            .or_insert_with(|| {
                self.descriptor
                    .schema
                    .iter()
                    .map(|f| (f.name.clone(), ColumnStats::new(&f.name, &f.kind)))
                    .collect()
            });
        for f in &self.descriptor.schema {
            let value = record.values.get(&f.name).unwrap_or(&Value::Null);
            if let Some(stats) = tenant_stats.get_mut(&f.name) {
                stats.observe(value);
            }
        }
    }

    /// Per-tenant statistics for one field.
    pub fn stats(&self, tenant: &str, field: &str) -> Option<&ColumnStats> {
        self.per_tenant.get(tenant)?.get(field)
    }

    /// Merged view of a field's statistics across all tenants.
    pub fn merged_stats(&self, field: &str) -> Result<ColumnStats, CatalogError> {
        let def = self
            .descriptor
            .field(field)
            .ok_or_else(|| CatalogError::UnknownField(field.to_string()))?;
        let mut merged = ColumnStats::new(field, &def.kind);
        for tenant_stats in self.per_tenant.values() {
            if let Some(s) = tenant_stats.get(field) {
                merged.merge(s);
            }
        }
        Ok(merged)
    }

    /// Recomputes a field's merged statistics by full scan. Test oracle for
    /// the incremental path; also used when reloading from disk.
    pub fn recompute_stats(&self, field: &str) -> Result<ColumnStats, CatalogError> {
        let def = self
            .descriptor
            .field(field)
            .ok_or_else(|| CatalogError::UnknownField(field.to_string()))?;
        let mut stats = ColumnStats::new(field, &def.kind);
        for record in &self.records {
            stats.observe(record.values.get(field).unwrap_or(&Value::Null));
        }
        Ok(stats)
    }

    /// Estimated fraction of rows satisfying an optional numeric range and
    /// an optional label predicate. Exact (full scan) up to
    /// [`EXACT_SELECTIVITY_ROWS`] rows, reservoir-estimated above.
    pub fn estimate_selectivity(
        &self,
        range: Option<(&str, f64, f64)>,
        labels: Option<(&str, &[String], LabelMode)>,
    ) -> Result<f64, CatalogError> {
        if let Some((field, _, _)) = range {
            let def = self
                .descriptor
                .field(field)
                .ok_or_else(|| CatalogError::UnknownField(field.to_string()))?;
            if def.kind != FieldKind::Numeric {
                return Err(CatalogError::KindMismatch {
                    field: field.to_string(),
                    expected: "numeric".into(),
                    actual: def.kind.name().into(),
                });
            }
        }
        if let Some((field, _, _)) = labels {
            let def = self
                .descriptor
                .field(field)
                .ok_or_else(|| CatalogError::UnknownField(field.to_string()))?;
            if def.kind != FieldKind::LabelSet {
                return Err(CatalogError::KindMismatch {
                    field: field.to_string(),
                    expected: "label-set".into(),
                    actual: def.kind.name().into(),
                });
            }
        }
        if self.records.is_empty() {
            return Ok(0.0);
        }
        if let Some((_, lo, hi)) = range {
            if lo > hi {
                return Ok(0.0);
            }
        }

        let satisfies = |record: &Record| -> bool {
            if let Some((field, lo, hi)) = range {
                match record.values.get(field).and_then(Value::as_number) {
                    Some(v) if v >= lo && v <= hi => {}
                    _ => return false,
                }
            }
            if let Some((field, wanted, mode)) = labels {
                let have = record
                    .values
                    .get(field)
                    .and_then(Value::as_labels)
                    .unwrap_or(&[]);
                match mode {
                    LabelMode::Any => {
                        if !wanted.iter().any(|w| have.contains(w)) {
                            return false;
                        }
                    }
                    LabelMode::All => {
                        if !wanted.iter().all(|w| have.contains(w)) {
                            return false;
                        }
                    }
                }
            }
            true
        };

        if self.records.len() <= EXACT_SELECTIVITY_ROWS {
            let hits = self.records.iter().filter(|r| satisfies(r)).count();
            Ok(hits as f64 / self.records.len() as f64)
        } else {
            let sample = &self.reservoir.rows;
            let hits = sample
                .iter()
                .filter(|&&i| satisfies(&self.records[i]))
                .count();
            Ok(hits as f64 / sample.len() as f64)
        }
    }
}

/// Handle to a dataset. Cloneable; per-dataset writes are serialized by the
/// inner lock while reads proceed concurrently.
pub type DatasetHandle = Arc<RwLock<Dataset>>;

/// The catalog: a registry of datasets.
#[derive(Default)]
pub struct Catalog {
    datasets: RwLock<BTreeMap<String, DatasetHandle>>,
}

impl Catalog {
    pub fn new() -> Self {
        Catalog::default()
    }

    pub fn register_dataset(
        &self,
        descriptor: DatasetDescriptor,
    ) -> Result<DatasetHandle, CatalogError> {
        descriptor.validate()?;
        let mut map = self.datasets.write().unwrap();
        if map.contains_key(&descriptor.dataset_id) {
            return Err(CatalogError::DuplicateDataset(descriptor.dataset_id));
        }
        let id = descriptor.dataset_id.clone();
        let handle: DatasetHandle = Arc::new(RwLock::new(Dataset::new(descriptor)));
        map.insert(id, handle.clone());
        Ok(handle)
    }

    pub fn dataset(&self, dataset_id: &str) -> Result<DatasetHandle, CatalogError> {
        self.datasets
            .read()
            .unwrap()
            .get(dataset_id)
            .cloned()
            .ok_or_else(|| CatalogError::UnknownDataset(dataset_id.to_string()))
    }

    pub fn dataset_ids(&self) -> Vec<String> {
        self.datasets.read().unwrap().keys().cloned().collect()
    }

    pub fn contains(&self, dataset_id: &str) -> bool {
        self.datasets.read().unwrap().contains_key(dataset_id)
    }
}
