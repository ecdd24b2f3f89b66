//! Feature management: model-ready views over a working set, greedy CMI
//! feature selection, interaction-candidate mining and retention, and
//! two-view embeddings.

pub mod cmi;
pub mod embed;
pub mod interact;

pub use cmi::{select_features_cmi, CmiError, SelectedFeature, DEFAULT_BINS, DEFAULT_GAIN_EPSILON};
pub use embed::{embed, AttributeEncoder, EmbeddingSpec, EncoderRegistry, HashingEncoder, NeighborDef};
pub use interact::{propose_interactions, retain_interactions, InteractionCandidate};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Dataset, FieldKind, Value};
use crate::select::{Segment, WorkingSet};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` has no usable kind for a feature view")]
    UnusableColumn(String),
    #[error("working set member `{0}` is missing from the dataset")]
    MissingRecord(String),
    #[error(transparent)]
    Cmi(#[from] CmiError),
    #[error("invalid embedding spec: {0}")]
    BadEmbeddingSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ColumnData {
    /// Missing values are NaN.
    Numeric(Vec<f64>),
    /// Dense codes with the code dictionary; missing values use the
    /// reserved code for `__null__`.
    Categorical { codes: Vec<u32>, names: Vec<String> },
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Numeric representation for learners: raw numerics, codes as floats.
    pub fn as_f64(&self) -> Vec<f64> {
        match self {
            ColumnData::Numeric(v) => v.clone(),
            ColumnData::Categorical { codes, .. } => codes.iter().map(|&c| c as f64).collect(),
        }
    }

    /// Binned codes for information estimates.
    pub fn binned(&self, bins: usize) -> Vec<u64> {
        match self {
            ColumnData::Numeric(v) => cmi::equal_frequency_bins(v, bins),
            ColumnData::Categorical { codes, .. } => codes.iter().map(|&c| c as u64).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    /// Pure, recorded transform chain; replaying it over the source
    /// records reproduces the materialized values.
    pub transforms: Vec<String>,
    pub data: ColumnData,
}

/// A materialized, row-aligned feature view over a working set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureView {
    pub id: String,
    pub working_set: String,
    pub target: String,
    pub record_ids: Vec<String>,
    pub segments: Vec<Segment>,
    pub columns: Vec<Column>,
}

impl FeatureView {
    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn rows(&self) -> usize {
        self.record_ids.len()
    }

    /// Row indices belonging to a segment.
    pub fn segment_rows(&self, segment: Segment) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == segment)
            .map(|(i, _)| i)
            .collect()
    }

    /// Feature matrix (row major) over the named columns.
    pub fn matrix(&self, names: &[String], rows: &[usize]) -> Result<Vec<Vec<f64>>, FeatureError> {
        let mut cols = Vec::new();
        for n in names {
            let c = self
                .column(n)
                .ok_or_else(|| FeatureError::UnknownColumn(n.clone()))?;
            cols.push(c.data.as_f64());
        }
        Ok(rows
            .iter()
            .map(|&r| cols.iter().map(|c| c[r]).collect())
            .collect())
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.columns
            .iter()
            .filter(|c| c.name != self.target)
            .map(|c| c.name.clone())
            .collect()
    }
}

/// Materializes a feature view over the working set's members: numeric
/// fields pass through, categorical and text fields are dictionary-coded.
/// Vector and label-set fields stay out of the tabular view.
pub fn build_view(
    dataset: &Dataset,
    working_set: &WorkingSet,
    target: &str,
) -> Result<FeatureView, FeatureError> {
    let descriptor = dataset.descriptor();
    if descriptor.field(target).is_none() {
        return Err(FeatureError::UnknownColumn(target.to_string()));
    }
    let usable: Vec<(String, ColumnKind)> = descriptor
        .schema
        .iter()
        .filter_map(|f| match f.kind {
            FieldKind::Numeric => Some((f.name.clone(), ColumnKind::Numeric)),
            FieldKind::Categorical | FieldKind::Text => {
                Some((f.name.clone(), ColumnKind::Categorical))
            }
            FieldKind::Vector { .. } | FieldKind::LabelSet => None,
        })
        .collect();
    if !usable.iter().any(|(n, _)| n == target) {
        return Err(FeatureError::UnusableColumn(target.to_string()));
    }

    let mut record_ids = Vec::with_capacity(working_set.members.len());
    let mut segments = Vec::with_capacity(working_set.members.len());
    let mut records = Vec::with_capacity(working_set.members.len());
    for m in &working_set.members {
        let r = dataset
            .record(&m.record_id)
            .ok_or_else(|| FeatureError::MissingRecord(m.record_id.clone()))?;
        record_ids.push(m.record_id.clone());
        segments.push(m.segment);
        records.push(r);
    }

    let mut columns = Vec::new();
    for (name, kind) in usable {
        let data = match kind {
            ColumnKind::Numeric => ColumnData::Numeric(
                records
                    .iter()
                    .map(|r| {
                        r.values
                            .get(&name)
                            .and_then(Value::as_number)
                            .unwrap_or(f64::NAN)
                    })
                    .collect(),
            ),
            ColumnKind::Categorical => {
                let mut names_dict: Vec<String> = vec!["__null__".to_string()];
                let mut codes = Vec::with_capacity(records.len());
                for r in &records {
                    let code = match r.values.get(&name).and_then(Value::as_text) {
                        Some(t) => match names_dict.iter().position(|n| n == t) {
                            Some(pos) => pos as u32,
                            None => {
                                names_dict.push(t.to_string());
                                (names_dict.len() - 1) as u32
                            }
                        },
                        None => 0,
                    };
                    codes.push(code);
                }
                ColumnData::Categorical {
                    codes,
                    names: names_dict,
                }
            }
        };
        let transforms = match kind {
            ColumnKind::Numeric => vec!["identity".to_string()],
            ColumnKind::Categorical => vec!["dictionary-code".to_string()],
        };
        columns.push(Column {
            name,
            kind,
            transforms,
            data,
        });
    }

    let id = crate::util::sha256_hex(
        format!("{}|{}|{}", working_set.manifest_id, target, columns.len()).as_bytes(),
    );
    Ok(FeatureView {
        id,
        working_set: working_set.manifest_id.clone(),
        target: target.to_string(),
        record_ids,
        segments,
        columns,
    })
}

/// Runs greedy CMI selection over a view's feature columns.
pub fn select_view_features(
    view: &FeatureView,
    budget: usize,
    bins: usize,
    epsilon: f64,
) -> Result<Vec<SelectedFeature>, FeatureError> {
    let target_col = view
        .column(&view.target)
        .ok_or_else(|| FeatureError::UnknownColumn(view.target.clone()))?;
    let target = target_col.data.binned(bins);
    let columns: Vec<(String, Vec<u64>)> = view
        .columns
        .iter()
        .filter(|c| c.name != view.target)
        .map(|c| (c.name.clone(), c.data.binned(bins)))
        .collect();
    let budget = budget.min(columns.len());
    Ok(select_features_cmi(&columns, &target, budget, epsilon)?)
}

/// The persisted contract consumed by the task engine and model store.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub view_id: String,
    pub working_set: String,
    pub target: String,
    pub columns: Vec<(String, ColumnKind, Vec<String>)>,
    pub selected: Vec<SelectedFeature>,
    pub interactions: Vec<InteractionCandidate>,
    pub embedding: Option<EmbeddingSpec>,
}

impl FeatureManifest {
    pub fn from_view(
        view: &FeatureView,
        selected: Vec<SelectedFeature>,
        interactions: Vec<InteractionCandidate>,
        embedding: Option<EmbeddingSpec>,
    ) -> Self {
        FeatureManifest {
            view_id: view.id.clone(),
            working_set: view.working_set.clone(),
            target: view.target.clone(),
            columns: view
                .columns
                .iter()
                .map(|c| (c.name.clone(), c.kind, c.transforms.clone()))
                .collect(),
            selected,
            interactions,
            embedding,
        }
    }
}
