//! Domain types for repetition annotations, plus release-format I/O,
//! record validation, dataset statistics and word-frequency analysis.

mod release;
mod stats;
mod validate;
mod words;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use release::{parse_release, release_entries, serialize_release, ReleaseEntry, ReleaseError};
pub use stats::{compute_stats, DatasetStats, StatsError, StatsFilter, Triple};
pub use validate::{annotation_violations, filter_valid, validate, Severity, Violation};
pub(crate) use validate::validate_annotation;
pub use words::{default_stop_words, tokenize, word_frequencies, EXTRA_STOP_WORDS};

/// Length of every candidate clip in this corpus, in seconds.
pub const CLIP_DURATION_SECS: f64 = 10.0;

/// Smallest count that still constitutes a repetition.
pub const MIN_COUNT: u32 = 2;

/// Half-open time interval in seconds, relative to the clip start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSegment {
    pub start: f64,
    pub end: f64,
}

impl TimeSegment {
    pub const fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    /// Builds a segment, rejecting inverted, negative or non-finite bounds.
    pub fn try_new(start: f64, end: f64) -> Result<Self, InvalidSegment> {
        if !start.is_finite() || !end.is_finite() {
            return Err(InvalidSegment::NonFinite);
        }
        if start < 0.0 {
            return Err(InvalidSegment::NegativeStart);
        }
        if start >= end {
            return Err(InvalidSegment::Inverted);
        }
        Ok(Self { start, end })
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_within(&self, clip_duration: f64) -> bool {
        self.start >= 0.0 && self.end <= clip_duration + 1e-9
    }
}

impl fmt::Display for TimeSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:.2}, {:.2}]", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum InvalidSegment {
    #[error("segment bounds must be finite")]
    NonFinite,
    #[error("segment start must be >= 0")]
    NegativeStart,
    #[error("segment start must be < end")]
    Inverted,
}

/// One rater's answer for one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub description: String,
    pub segment: TimeSegment,
    pub count: u32,
    pub rater_id: String,
    /// Per-annotation agreement flag as carried by the release files.
    /// `None` for annotations that have not been through resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<bool>,
}

impl Annotation {
    pub fn new(
        description: impl Into<String>,
        segment: TimeSegment,
        count: u32,
        rater_id: impl Into<String>,
    ) -> Self {
        Self {
            description: description.into(),
            segment,
            count,
            rater_id: rater_id.into(),
            agreement: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Ego4D,
    Kinetics,
}

impl Source {
    /// Sampling rate of released clips.
    pub fn fps(self) -> f64 {
        match self {
            Source::Ego4D => 30.0,
            Source::Kinetics => 25.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Ego4D => "ego4d",
            Source::Kinetics => "kinetics",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ego4d" | "ego" => Ok(Source::Ego4D),
            "kinetics" | "exo" => Ok(Source::Kinetics),
            other => Err(format!("unknown source `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

impl Split {
    /// Parses a release-file split label. `Unassigned` has no release label.
    pub fn from_label(label: &str) -> Option<Split> {
        match label.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

/// Lifecycle of a clip through curation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipState {
    Candidate,
    ValidityPending,
    Valid,
    Invalid,
    Annotated,
    Resolved,
    Rejected,
}

/// Identity, timing, annotations and lifecycle state of one 10 s clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub source: Source,
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narration_timestamp: Option<f64>,
    pub fps: f64,
    pub split: Split,
    pub consistent: bool,
    pub annotations: Vec<Annotation>,
    pub state: ClipState,
}

impl ClipRecord {
    /// A fresh candidate with the source's canonical frame rate.
    pub fn candidate(source: Source, video_id: impl Into<String>, narration_timestamp: Option<f64>) -> Self {
        Self {
            source,
            video_id: video_id.into(),
            narration_timestamp,
            fps: source.fps(),
            split: Split::Unassigned,
            consistent: false,
            annotations: Vec::new(),
            state: ClipState::Candidate,
        }
    }

    pub fn key(&self) -> ClipKey {
        ClipKey::new(self.source, &self.video_id, self.narration_timestamp)
    }
}

/// Unique clip identity: `video_id` for Kinetics, `(video_id, narration
/// timestamp)` for Ego4D. Timestamps are keyed at millisecond resolution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClipKey(String);

impl ClipKey {
    pub fn new(source: Source, video_id: &str, narration_timestamp: Option<f64>) -> Self {
        match narration_timestamp {
            Some(ts) => {
                let millis = (ts * 1000.0).round() as i64;
                ClipKey(format!("{}:{}:{}", source.as_str(), video_id, millis))
            }
            None => ClipKey(format!("{}:{}", source.as_str(), video_id)),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn from_raw(raw: impl Into<String>) -> Self {
        ClipKey(raw.into())
    }
}

impl fmt::Display for ClipKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_constructor_rejects_bad_bounds() {
        assert!(TimeSegment::try_new(2.0, 6.0).is_ok());
        assert_eq!(TimeSegment::try_new(6.0, 2.0), Err(InvalidSegment::Inverted));
        assert_eq!(TimeSegment::try_new(1.0, 1.0), Err(InvalidSegment::Inverted));
        assert_eq!(TimeSegment::try_new(-0.1, 1.0), Err(InvalidSegment::NegativeStart));
        assert_eq!(TimeSegment::try_new(f64::NAN, 1.0), Err(InvalidSegment::NonFinite));
    }

    #[test]
    fn clip_keys_distinguish_ego_narrations() {
        let a = ClipKey::new(Source::Ego4D, "v1", Some(12.0));
        let b = ClipKey::new(Source::Ego4D, "v1", Some(47.0));
        assert_ne!(a, b);
        assert_eq!(ClipKey::new(Source::Kinetics, "v1", None).as_str(), "kinetics:v1");
    }

    #[test]
    fn source_frame_rates() {
        assert_eq!(Source::Ego4D.fps(), 30.0);
        assert_eq!(Source::Kinetics.fps(), 25.0);
    }
}
