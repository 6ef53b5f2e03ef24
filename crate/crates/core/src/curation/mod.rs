//! Four-stage dataset curation: candidate selection, validity check,
//! two-rater annotation, and agreement resolution with split assignment.

mod checkpoint;
pub mod llm;
pub mod panel;
pub mod pipeline;

use serde::{Deserialize, Serialize};

use crate::annotation::{TimeSegment, CLIP_DURATION_SECS};

pub use llm::{
    build_prompt, interpret_reply, narration_filter, FilterDecision, KeywordLlm, LlmClient, LlmError, RetryPolicy,
    Throttled,
};
pub use panel::{PanelError, RaterPanel, ScriptedPanel, SimulatedPanel};
pub use pipeline::{
    load_feature_dir, load_narrations, released, run_pipeline, ExoClip, FeatureRef, PipelineConfig, PipelineError,
    PipelineInput, PipelineReport, Stage,
};

/// An Ego4D-style narration that may become a clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrationCandidate {
    pub video_id: String,
    #[serde(alias = "narration_timestamp_secs", alias = "timestamp")]
    pub narration_timestamp: f64,
    #[serde(alias = "narration", alias = "text")]
    pub narration_text: String,
    /// Length of the source video in seconds, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_duration: Option<f64>,
}

impl NarrationCandidate {
    pub fn new(video_id: impl Into<String>, narration_timestamp: f64, narration_text: impl Into<String>) -> Self {
        Self {
            video_id: video_id.into(),
            narration_timestamp,
            narration_text: narration_text.into(),
            video_duration: None,
        }
    }

    /// The clip window: the timestamp +- 5 s, clipped to the video.
    pub fn window(&self) -> TimeSegment {
        let half = CLIP_DURATION_SECS / 2.0;
        let start = (self.narration_timestamp - half).max(0.0);
        let mut end = self.narration_timestamp + half;
        if let Some(d) = self.video_duration {
            end = end.min(d);
        }
        TimeSegment::new(start, end.max(start))
    }
}

/// Greedy sweep in timestamp order within each video: a candidate is dropped
/// when its window overlaps (with positive length) a window already kept.
/// Kept candidates are returned in input order.
pub fn remove_overlaps(candidates: &[NarrationCandidate]) -> Vec<NarrationCandidate> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&candidates[a], &candidates[b]);
        x.video_id
            .cmp(&y.video_id)
            .then(x.narration_timestamp.total_cmp(&y.narration_timestamp))
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; candidates.len()];
    let mut last: Option<(&str, f64)> = None;
    for i in order {
        let c = &candidates[i];
        let w = c.window();
        let overlaps = matches!(last, Some((vid, end)) if vid == c.video_id && w.start < end);
        if !overlaps {
            keep[i] = true;
            last = Some((&c.video_id, w.end));
        }
    }
    candidates
        .iter()
        .zip(keep)
        .filter_map(|(c, k)| k.then(|| c.clone()))
        .collect()
}
