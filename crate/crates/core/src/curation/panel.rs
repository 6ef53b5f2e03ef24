//! Human rater stand-ins for the validity and annotation stages.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{Annotation, ClipRecord, TimeSegment, CLIP_DURATION_SECS};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PanelError {
    #[error("no scripted response for clip {key}, rater {rater}")]
    NoScript { key: String, rater: usize },
    #[error("rater unavailable: {0}")]
    Unavailable(String),
    #[error("bad panel script: {0}")]
    Script(String),
}

/// Answers the questions asked of human raters. `rater` is the 0-based
/// position of the rater on the clip (2 is the tie-breaker).
pub trait RaterPanel: Send + Sync {
    fn has_repetition(&self, clip: &ClipRecord, rater: usize) -> Result<bool, PanelError>;
    fn annotate(&self, clip: &ClipRecord, rater: usize) -> Result<Annotation, PanelError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedAnnotation {
    pub start: f64,
    pub end: f64,
    pub count: u32,
    pub description: String,
    #[serde(default)]
    pub rater: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipScript {
    #[serde(default)]
    pub validity: Vec<bool>,
    #[serde(default)]
    pub annotations: Vec<ScriptedAnnotation>,
}

/// Replays recorded responses, keyed by clip key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScriptedPanel {
    pub clips: HashMap<String, ClipScript>,
}

impl ScriptedPanel {
    pub fn from_json(bytes: &[u8]) -> Result<Self, PanelError> {
        serde_json::from_slice(bytes).map_err(|e| PanelError::Script(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PanelError> {
        let bytes = std::fs::read(path).map_err(|e| PanelError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    fn script(&self, clip: &ClipRecord) -> Option<&ClipScript> {
        self.clips.get(clip.key().as_str())
    }
}

impl RaterPanel for ScriptedPanel {
    fn has_repetition(&self, clip: &ClipRecord, rater: usize) -> Result<bool, PanelError> {
        self.script(clip)
            .and_then(|s| s.validity.get(rater).copied())
            .ok_or_else(|| PanelError::NoScript {
                key: clip.key().to_string(),
                rater,
            })
    }

    fn annotate(&self, clip: &ClipRecord, rater: usize) -> Result<Annotation, PanelError> {
        let a = self
            .script(clip)
            .and_then(|s| s.annotations.get(rater))
            .ok_or_else(|| PanelError::NoScript {
                key: clip.key().to_string(),
                rater,
            })?;
        let seg = TimeSegment::try_new(a.start, a.end).map_err(|e| PanelError::Script(format!("{}: {e}", clip.key())))?;
        let id = a.rater.clone().unwrap_or_else(|| format!("rater-{rater}"));
        Ok(Annotation::new(a.description.clone(), seg, a.count, id))
    }
}

/// Seeded synthetic raters. Every answer depends only on the seed, the clip
/// key and the rater position, never on call order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPanel {
    pub seed: u64,
    /// Probability that a clip really contains a repetition.
    pub repetition_rate: f64,
    /// Probability that a rater answers the validity question wrongly.
    pub validity_noise: f64,
    /// Probability that a rater's count or segment is far off.
    pub sloppy_rate: f64,
}

impl Default for SimulatedPanel {
    fn default() -> Self {
        Self {
            seed: 0,
            repetition_rate: 0.6,
            validity_noise: 0.05,
            sloppy_rate: 0.2,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl SimulatedPanel {
    fn rng(&self, clip: &ClipRecord, stream: u64) -> ChaCha8Rng {
        let h = fnv1a(clip.key().as_str().as_bytes());
        ChaCha8Rng::seed_from_u64(self.seed ^ h.rotate_left(17) ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    /// The clip's hidden ground truth: (has repetition, segment, count).
    fn truth(&self, clip: &ClipRecord) -> (bool, TimeSegment, u32) {
        let mut rng = self.rng(clip, 0);
        let real = rng.random_bool(self.repetition_rate.clamp(0.0, 1.0));
        let len = rng.random_range(2.0..=CLIP_DURATION_SECS);
        let start = rng.random_range(0.0..=(CLIP_DURATION_SECS - len));
        let count = rng.random_range(2..=20);
        (real, TimeSegment::new(start, start + len), count)
    }
}

impl RaterPanel for SimulatedPanel {
    fn has_repetition(&self, clip: &ClipRecord, rater: usize) -> Result<bool, PanelError> {
        let (real, _, _) = self.truth(clip);
        let mut rng = self.rng(clip, 1 + rater as u64);
        Ok(real ^ rng.random_bool(self.validity_noise.clamp(0.0, 1.0)))
    }

    fn annotate(&self, clip: &ClipRecord, rater: usize) -> Result<Annotation, PanelError> {
        let (_, seg, count) = self.truth(clip);
        let mut rng = self.rng(clip, 100 + rater as u64);
        let sloppy = rng.random_bool(self.sloppy_rate.clamp(0.0, 1.0));
        let (seg, count) = if sloppy {
            let len = rng.random_range(1.0..=CLIP_DURATION_SECS);
            let start = rng.random_range(0.0..=(CLIP_DURATION_SECS - len));
            (TimeSegment::new(start, start + len), rng.random_range(2..=30))
        } else {
            let jitter = 0.1 * seg.duration();
            let start = (seg.start + rng.random_range(-jitter..=jitter)).clamp(0.0, seg.end - 0.5);
            let end = (seg.end + rng.random_range(-jitter..=jitter)).clamp(start + 0.5, CLIP_DURATION_SECS);
            let count = (count as i64 + rng.random_range(-1..=1)).max(2) as u32;
            (TimeSegment::new(start, end), count)
        };
        Ok(Annotation::new("repeating action", seg, count, format!("sim-{rater}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::Source;

    #[test]
    fn scripted_lookup() {
        let json = br#"{"ego4d:v1:12000": {"validity": [true, false],
            "annotations": [{"start": 2, "end": 6, "count": 4, "description": "stirring"}]}}"#;
        let p = ScriptedPanel::from_json(json).unwrap();
        let clip = ClipRecord::candidate(Source::Ego4D, "v1", Some(12.0));
        assert!(p.has_repetition(&clip, 0).unwrap());
        assert!(!p.has_repetition(&clip, 1).unwrap());
        assert!(matches!(p.has_repetition(&clip, 2), Err(PanelError::NoScript { rater: 2, .. })));
        let a = p.annotate(&clip, 0).unwrap();
        assert_eq!((a.segment, a.count, a.rater_id.as_str()), (TimeSegment::new(2.0, 6.0), 4, "rater-0"));
        let other = ClipRecord::candidate(Source::Ego4D, "v2", Some(12.0));
        assert!(p.annotate(&other, 0).is_err());
    }

    #[test]
    fn simulated_is_order_independent() {
        let p = SimulatedPanel::default();
        let a = ClipRecord::candidate(Source::Kinetics, "a", None);
        let b = ClipRecord::candidate(Source::Kinetics, "b", None);
        let first = p.annotate(&a, 1).unwrap();
        let _ = p.annotate(&b, 0).unwrap();
        assert_eq!(p.annotate(&a, 1).unwrap(), first);
        assert!(first.segment.is_within(CLIP_DURATION_SECS));
        assert!(first.count >= 2);
    }
}
