use serde::{Deserialize, Serialize};

use super::{words::tokenize, Annotation, ClipRecord, ClipState, Source, Split, CLIP_DURATION_SECS, MIN_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    /// Range or structural violation; the record is excluded in strict mode.
    Error,
    /// Soft vocabulary issue.
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
    pub severity: Severity,
}

impl Violation {
    fn error(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
            severity: Severity::Error,
        }
    }

    fn warning(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
            severity: Severity::Warning,
        }
    }
}

/// Checks a single annotation. Field names are prefixed with `prefix`.
pub(crate) fn validate_annotation(a: &Annotation, prefix: &str, out: &mut Vec<Violation>) {
    let seg = a.segment;
    if !seg.start.is_finite() || !seg.end.is_finite() {
        out.push(Violation::error(format!("{prefix}segment"), "bounds must be finite"));
    } else {
        if seg.start < 0.0 {
            out.push(Violation::error(format!("{prefix}start_time"), "start ≥ 0"));
        }
        if seg.start >= seg.end {
            out.push(Violation::error(format!("{prefix}start_time"), "start < end"));
        }
        if seg.end > CLIP_DURATION_SECS + 1e-9 {
            out.push(Violation::error(
                format!("{prefix}end_time"),
                format!("end ≤ clip duration ({CLIP_DURATION_SECS} s)"),
            ));
        }
    }
    if a.count < MIN_COUNT {
        out.push(Violation::error(format!("{prefix}count"), "count ≥ 2"));
    }
    if a.description.trim().is_empty() {
        out.push(Violation::error(format!("{prefix}description"), "description non-empty"));
    } else if tokenize(&a.description).is_empty() {
        out.push(Violation::warning(
            format!("{prefix}description"),
            "description contains no word tokens",
        ));
    }
}

/// Returns every invariant violation of `record`; empty iff the record is
/// well-formed (warnings included).
pub fn validate(record: &ClipRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    match record.source {
        Source::Ego4D if record.narration_timestamp.is_none() => {
            out.push(Violation::error("narration_timestamp", "Ego4D clips carry a narration timestamp"));
        }
        Source::Kinetics if record.narration_timestamp.is_some() => {
            out.push(Violation::error(
                "narration_timestamp",
                "Kinetics clips carry no narration timestamp",
            ));
        }
        _ => {}
    }
    if (record.fps - record.source.fps()).abs() > 1e-9 {
        out.push(Violation::error(
            "fps",
            format!("fps = {} for {}", record.source.fps(), record.source),
        ));
    }
    if record.state == ClipState::Resolved && record.annotations.len() < 2 {
        out.push(Violation::error("annotations", "Resolved implies ≥ 2 annotations"));
    }
    if record.split == Split::Test && !record.consistent {
        out.push(Violation::error("consistent", "Test split implies consistent"));
    }
    for (i, a) in record.annotations.iter().enumerate() {
        validate_annotation(a, &format!("annotations[{i}]."), &mut out);
    }
    out
}

/// Violations of a single annotation, with unprefixed field names.
pub fn annotation_violations(a: &Annotation) -> Vec<Violation> {
    let mut out = Vec::new();
    validate_annotation(a, "", &mut out);
    out
}

/// Drops records with error-severity violations when `strict`; otherwise
/// returns all records.
pub fn filter_valid(records: Vec<ClipRecord>, strict: bool) -> Vec<ClipRecord> {
    if !strict {
        return records;
    }
    records
        .into_iter()
        .filter(|r| validate(r).iter().all(|v| v.severity != Severity::Error))
        .collect()
}
