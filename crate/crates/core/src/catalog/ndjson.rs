//! External file formats: newline-delimited record JSON and schema JSON.
//!
//! Record lines are JSON objects with reserved keys `_id`, `_tenant` and
//! `_ts`; all other keys are field values. Vector fields are numeric
//! arrays, label sets are string arrays.

use std::io::{BufRead, Write};

use serde_json::Value as Json;
use thiserror::Error;

use super::{DatasetDescriptor, FieldKind, Record, Value};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {0}: {1}")]
    Line(usize, String),
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn read_schema(reader: impl std::io::Read) -> Result<DatasetDescriptor, FormatError> {
    serde_json::from_reader(reader).map_err(|e| FormatError::Schema(e.to_string()))
}

pub fn write_schema(
    writer: impl std::io::Write,
    descriptor: &DatasetDescriptor,
) -> Result<(), FormatError> {
    serde_json::to_writer_pretty(writer, descriptor)
        .map_err(|e| FormatError::Schema(e.to_string()))
}

fn json_to_value(json: &Json, kind: &FieldKind) -> Option<Value> {
    match (json, kind) {
        (Json::Null, _) => Some(Value::Null),
        (Json::Number(n), FieldKind::Numeric) => n.as_f64().map(Value::Number),
        (Json::String(s), FieldKind::Categorical | FieldKind::Text) => {
            Some(Value::Text(s.clone()))
        }
        (Json::Array(items), FieldKind::Vector { dim }) => {
            if items.len() != *dim {
                return None;
            }
            let mut v = Vec::with_capacity(items.len());
            for item in items {
                v.push(item.as_f64()? as f32);
            }
            Some(Value::Vector(v))
        }
        (Json::Array(items), FieldKind::LabelSet) => {
            let mut v = Vec::with_capacity(items.len());
            for item in items {
                v.push(item.as_str()?.to_string());
            }
            Some(Value::Labels(v))
        }
        _ => None,
    }
}

fn value_to_json(value: &Value) -> Json {
    match value {
        Value::Null => Json::Null,
        Value::Number(n) => serde_json::json!(n),
        Value::Text(t) => Json::String(t.clone()),
        Value::Vector(v) => serde_json::json!(v),
        Value::Labels(l) => serde_json::json!(l),
    }
}

/// Parses NDJSON records against a descriptor. Lines that do not parse as
/// JSON objects are errors; per-field kind violations are preserved as-is
/// so ingest can reject them with a reason.
pub fn read_records(
    reader: impl BufRead,
    descriptor: &DatasetDescriptor,
) -> Result<Vec<Record>, FormatError> {
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let json: Json = serde_json::from_str(&line)
            .map_err(|e| FormatError::Line(lineno + 1, e.to_string()))?;
        let Json::Object(obj) = json else {
            return Err(FormatError::Line(lineno + 1, "not a JSON object".into()));
        };
        let mut record = Record::new(
            obj.get("_id")
                .and_then(Json::as_str)
                .unwrap_or_default()
                .to_string(),
        );
        if let Some(t) = obj.get("_tenant").and_then(Json::as_str) {
            record.tenant = t.to_string();
        }
        if let Some(ts) = obj.get("_ts").and_then(Json::as_i64) {
            record.timestamp = ts;
        }
        for (key, val) in &obj {
            if key.starts_with('_') {
                continue;
            }
            let value = match descriptor.field(key) {
                Some(def) => json_to_value(val, &def.kind).unwrap_or_else(|| {
                    // Keep a kind-violating stand-in so ingest rejects it
                    // with a kind-mismatch reason instead of silently
                    // dropping the field.
                    match &def.kind {
                        FieldKind::Numeric => Value::Text(val.to_string()),
                        _ => Value::Number(f64::NAN),
                    }
                }),
                // Unknown fields surface as ingest rejections too.
                None => Value::Text(val.to_string()),
            };
            record.values.insert(key.clone(), value);
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_records(
    mut writer: impl Write,
    records: &[Record],
) -> Result<(), FormatError> {
    for record in records {
        let mut obj = serde_json::Map::new();
        obj.insert("_id".into(), Json::String(record.record_id.clone()));
        obj.insert("_tenant".into(), Json::String(record.tenant.clone()));
        obj.insert("_ts".into(), serde_json::json!(record.timestamp));
        for (k, v) in &record.values {
            obj.insert(k.clone(), value_to_json(v));
        }
        serde_json::to_writer(&mut writer, &Json::Object(obj))
            .map_err(|e| FormatError::Schema(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
