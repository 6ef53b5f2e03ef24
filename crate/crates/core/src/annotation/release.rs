//! Reading and writing the public release document: a JSON array with one
//! object per retained annotation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Annotation, ClipKey, ClipRecord, ClipState, Source, Split, TimeSegment, MIN_COUNT};

/// One row of the release document. Field names and order are the public
/// schema and must not change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseEntry {
    pub description: String,
    pub start_time: f64,
    pub end_time: f64,
    pub count: u32,
    pub split: String,
    pub inter_rater_agreement: bool,
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narration_timestamp_secs: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReleaseError {
    #[error("malformed release document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("release document must be a JSON array (or an object of entries)")]
    NotAnArray,
    #[error("record {index}: field `{field}`: {reason}")]
    Field {
        index: usize,
        field: &'static str,
        reason: String,
    },
    #[error("record {index}: field `split`: unknown split label `{label}`")]
    UnknownSplit { index: usize, label: String },
    #[error("clip {key}: split is unassigned and cannot be exported")]
    UnassignedSplit { key: ClipKey },
}

fn field_err(index: usize, field: &'static str, reason: impl Into<String>) -> ReleaseError {
    ReleaseError::Field {
        index,
        field,
        reason: reason.into(),
    }
}

fn get_f64(obj: &Map<String, Value>, index: usize, field: &'static str) -> Result<f64, ReleaseError> {
    match obj.get(field) {
        Some(Value::Number(n)) => n
            .as_f64()
            .ok_or_else(|| field_err(index, field, "not representable as a float")),
        Some(Value::String(s)) => s
            .trim()
            .parse::<f64>()
            .map_err(|_| field_err(index, field, format!("`{s}` is not a number"))),
        Some(_) => Err(field_err(index, field, "expected a number")),
        None => Err(field_err(index, field, "missing")),
    }
}

fn get_count(obj: &Map<String, Value>, index: usize) -> Result<u32, ReleaseError> {
    let raw = get_f64(obj, index, "count")?;
    if raw.fract() != 0.0 || raw < 0.0 || raw > u32::MAX as f64 {
        return Err(field_err(index, "count", format!("{raw} is not a non-negative integer")));
    }
    let count = raw as u32;
    if count < MIN_COUNT {
        return Err(field_err(index, "count", format!("count ≥ {MIN_COUNT} violated (got {count})")));
    }
    Ok(count)
}

fn get_string(obj: &Map<String, Value>, index: usize, field: &'static str) -> Result<String, ReleaseError> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err(field_err(index, field, "expected a string")),
        None => Err(field_err(index, field, "missing")),
    }
}

fn get_bool(obj: &Map<String, Value>, index: usize, field: &'static str) -> Result<bool, ReleaseError> {
    match obj.get(field) {
        Some(Value::Bool(b)) => Ok(*b),
        Some(Value::Number(n)) => Ok(n.as_f64().is_some_and(|x| x != 0.0)),
        Some(Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(field_err(index, field, format!("`{s}` is not a boolean"))),
        },
        Some(_) => Err(field_err(index, field, "expected a boolean")),
        None => Err(field_err(index, field, "missing")),
    }
}

/// Parses a release document into one [`ClipRecord`] per unique clip.
///
/// Ego4D clips are keyed on `(video_id, narration_timestamp_secs)`, Kinetics
/// clips on `video_id`. Records keep first-appearance order and annotations
/// keep document order.
pub fn parse_release(bytes: &[u8], source: Source) -> Result<Vec<ClipRecord>, ReleaseError> {
    let doc: Value = serde_json::from_slice(bytes)?;
    let entries: Vec<Value> = match doc {
        Value::Array(items) => items,
        Value::Object(map) => map.into_iter().map(|(_, v)| v).collect(),
        _ => return Err(ReleaseError::NotAnArray),
    };

    let mut records: Vec<ClipRecord> = Vec::new();
    let mut by_key: HashMap<ClipKey, usize> = HashMap::new();

    for (index, entry) in entries.iter().enumerate() {
        let obj = entry
            .as_object()
            .ok_or_else(|| field_err(index, "record", "expected an object"))?;

        let description = get_string(obj, index, "description")?;
        let start = get_f64(obj, index, "start_time")?;
        let end = get_f64(obj, index, "end_time")?;
        if start >= end {
            return Err(field_err(
                index,
                "start_time",
                format!("start_time {start} must be < end_time {end}"),
            ));
        }
        let count = get_count(obj, index)?;
        let label = get_string(obj, index, "split")?;
        let split = Split::from_label(&label).ok_or(ReleaseError::UnknownSplit { index, label })?;
        let agreement = get_bool(obj, index, "inter_rater_agreement")?;
        let video_id = get_string(obj, index, "video_id")?;

        let narration_timestamp = match source {
            Source::Ego4D => Some(get_f64(obj, index, "narration_timestamp_secs")?),
            Source::Kinetics => None,
        };

        let key = ClipKey::new(source, &video_id, narration_timestamp);
        let slot = *by_key.entry(key).or_insert_with(|| {
            let mut rec = ClipRecord::candidate(source, video_id.clone(), narration_timestamp);
            rec.split = split;
            records.push(rec);
            records.len() - 1
        });
        let record = &mut records[slot];
        if record.split != split {
            return Err(field_err(
                index,
                "split",
                format!("clip already assigned to `{}`", record.split.label()),
            ));
        }
        let rater = format!("anon-{}", record.annotations.len());
        let mut annotation = Annotation::new(description, TimeSegment::new(start, end), count, rater);
        annotation.agreement = Some(agreement);
        record.annotations.push(annotation);
    }

    for record in &mut records {
        record.consistent = record.annotations.iter().any(|a| a.agreement == Some(true));
        record.state = if record.annotations.len() >= 2 {
            ClipState::Resolved
        } else {
            ClipState::Annotated
        };
    }
    Ok(records)
}

/// Flattens records into release rows, one per retained annotation.
pub fn release_entries(records: &[ClipRecord]) -> Result<Vec<ReleaseEntry>, ReleaseError> {
    let mut out = Vec::new();
    for record in records {
        if record.split == Split::Unassigned {
            return Err(ReleaseError::UnassignedSplit { key: record.key() });
        }
        for a in &record.annotations {
            out.push(ReleaseEntry {
                description: a.description.clone(),
                start_time: a.segment.start,
                end_time: a.segment.end,
                count: a.count,
                split: record.split.label().to_string(),
                inter_rater_agreement: a.agreement.unwrap_or(record.consistent),
                video_id: record.video_id.clone(),
                narration_timestamp_secs: match record.source {
                    Source::Ego4D => record.narration_timestamp,
                    Source::Kinetics => None,
                },
            });
        }
    }
    Ok(out)
}

/// Serializes records as a release document (pretty-printed JSON array).
pub fn serialize_release(records: &[ClipRecord]) -> Result<Vec<u8>, ReleaseError> {
    let entries = release_entries(records)?;
    let mut bytes = serde_json::to_vec_pretty(&entries)?;
    bytes.push(b'\n');
    Ok(bytes)
}
