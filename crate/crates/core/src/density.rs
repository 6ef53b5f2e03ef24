//! Per-frame density targets and the counting-loss arithmetic.
//!
//! A ground-truth density places one unit of mass at the midpoint of each
//! repetition period, so the vector sums to the repetition count. Periods are
//! the uniform partition of the annotated segment, since annotations carry
//! only `(segment, count)`.

use serde::{Deserialize, Serialize};

use crate::annotation::TimeSegment;
use crate::numeric::{median, round_count};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityVector {
    pub values: Vec<f64>,
    pub fps: f64,
}

impl DensityVector {
    pub fn new(values: Vec<f64>, fps: f64) -> Result<Self, DensityError> {
        if values.is_empty() {
            return Err(DensityError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DensityError::NegativeEntry(i));
        }
        Ok(Self { values, fps })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DensityError {
    #[error("density vector must have at least one frame")]
    Empty,
    #[error("density entry {0} is negative or non-finite")]
    NegativeEntry(usize),
    #[error("count must be >= 1 (use build_zero_target for mismatched conditioning)")]
    ZeroCount,
    #[error("segment {segment} lies outside the clip [0, {clip_secs}]")]
    SegmentOutsideClip { segment: TimeSegment, clip_secs: f64 },
    #[error("fps must be positive")]
    BadFps,
    #[error("length mismatch: prediction has {pred} frames, target has {target}")]
    LengthMismatch { pred: usize, target: usize },
}

/// Shape of each per-period peak.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum PeakShape {
    /// Unit mass on the nearest frame.
    #[default]
    Impulse,
    /// Gaussian bump with the given standard deviation in frames,
    /// renormalized so each peak still carries unit mass.
    Gaussian { sigma_frames: f64 },
}

/// Ground-truth density with unit impulses at period midpoints.
pub fn build_density(
    segment: TimeSegment,
    count: u32,
    num_frames: usize,
    fps: f64,
) -> Result<DensityVector, DensityError> {
    build_density_with(segment, count, num_frames, fps, PeakShape::Impulse)
}

/// Midpoint time (seconds) of each of `count` equal periods of `segment`.
pub fn period_midpoints(segment: TimeSegment, count: u32) -> Vec<f64> {
    let width = segment.duration() / count as f64;
    (0..count)
        .map(|i| segment.start + (i as f64 + 0.5) * width)
        .collect()
}

pub fn build_density_with(
    segment: TimeSegment,
    count: u32,
    num_frames: usize,
    fps: f64,
    shape: PeakShape,
) -> Result<DensityVector, DensityError> {
    if num_frames == 0 {
        return Err(DensityError::Empty);
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(DensityError::BadFps);
    }
    if count == 0 {
        return Err(DensityError::ZeroCount);
    }
    let clip_secs = num_frames as f64 / fps;
    if !(segment.start >= 0.0 && segment.start < segment.end && segment.end <= clip_secs + 1e-9) {
        return Err(DensityError::SegmentOutsideClip { segment, clip_secs });
    }

    let mut values = vec![0.0; num_frames];
    let last = (num_frames - 1) as f64;
    for t in period_midpoints(segment, count) {
        let pos = t * fps;
        match shape {
            PeakShape::Impulse => {
                let idx = pos.round().clamp(0.0, last) as usize;
                values[idx] += 1.0;
            }
            PeakShape::Gaussian { sigma_frames } if sigma_frames > 0.0 => {
                add_gaussian(&mut values, pos.clamp(0.0, last), sigma_frames);
            }
            PeakShape::Gaussian { .. } => {
                let idx = pos.round().clamp(0.0, last) as usize;
                values[idx] += 1.0;
            }
        }
    }
    Ok(DensityVector { values, fps })
}

fn add_gaussian(values: &mut [f64], center: f64, sigma: f64) {
    let radius = (4.0 * sigma).ceil() as isize;
    let c = center.round() as isize;
    let lo = (c - radius).max(0) as usize;
    let hi = ((c + radius) as usize).min(values.len() - 1);
    let weights: Vec<f64> = (lo..=hi)
        .map(|i| {
            let d = (i as f64 - center) / sigma;
            (-0.5 * d * d).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    for (w, v) in weights.iter().zip(&mut values[lo..=hi]) {
        *v += w / total;
    }
}

/// All-zero target used when the conditioning text does not match the clip.
pub fn build_zero_target(num_frames: usize, fps: f64) -> Result<DensityVector, DensityError> {
    if num_frames == 0 {
        return Err(DensityError::Empty);
    }
    Ok(DensityVector {
        values: vec![0.0; num_frames],
        fps,
    })
}

/// Sum of the density rounded half away from zero.
pub fn count_from_density(d: &DensityVector) -> u32 {
    round_count(d.sum())
}

/// Parameters for turning a density back into a repetition segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentExtraction {
    /// Frames with value strictly above this are active.
    pub threshold: f64,
    /// Maximum number of inactive frames bridged between two active runs.
    /// `None` estimates it as 1.5x the median inter-peak gap.
    pub gap_frames: Option<usize>,
}

impl Default for SegmentExtraction {
    fn default() -> Self {
        Self {
            threshold: 0.005,
            gap_frames: None,
        }
    }
}

pub const FALLBACK_GAP_FRAMES: usize = 15;

/// 1.5x the median distance between consecutive local maxima among active
/// frames; [`FALLBACK_GAP_FRAMES`] when fewer than two peaks exist.
pub fn estimate_gap(values: &[f64], threshold: f64) -> usize {
    let n = values.len();
    let peaks: Vec<usize> = (0..n)
        .filter(|&i| {
            let v = values[i];
            v > threshold
                && (i == 0 || values[i - 1] < v)
                && (i + 1 == n || values[i + 1] <= v)
        })
        .collect();
    let gaps: Vec<f64> = peaks.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    match median(&gaps) {
        Some(m) => (1.5 * m).round() as usize,
        None => FALLBACK_GAP_FRAMES,
    }
}

/// Frame runs `[first, last_exclusive)` where `active(i)` holds, with runs
/// separated by at most `gap` inactive frames merged.
pub fn merged_runs(n: usize, active: impl Fn(usize) -> bool, gap: usize) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        if !active(i) {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && active(i) {
            i += 1;
        }
        match runs.last_mut() {
            Some(prev) if start - prev.1 <= gap => prev.1 = i,
            _ => runs.push((start, i)),
        }
    }
    runs
}

/// Earliest merged active run of `d`, converted to seconds.
pub fn segment_from_density(d: &DensityVector, params: &SegmentExtraction) -> Option<TimeSegment> {
    let gap = params
        .gap_frames
        .unwrap_or_else(|| estimate_gap(&d.values, params.threshold));
    let runs = merged_runs(d.values.len(), |i| d.values[i] > params.threshold, gap);
    runs.first()
        .map(|&(first, end)| TimeSegment::new(first as f64 / d.fps, end as f64 / d.fps))
}

/// Mean over frames of the squared difference of `scale`-scaled densities.
pub fn scaled_mse(pred: &DensityVector, target: &DensityVector, scale: f64) -> Result<f64, DensityError> {
    if pred.len() != target.len() {
        return Err(DensityError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    let sum: f64 = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(p, t)| {
            let d = scale * p - scale * t;
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub contrastive_weight: f64,
    pub normalizer: f64,
    pub density_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive_weight: 10.0,
            normalizer: 4.0,
            density_scale: 100.0,
        }
    }
}

/// Per-sample loss components: counting loss without text, with matching
/// text, with mismatched text, and the text-video contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub class_agnostic: f64,
    pub class_aware: f64,
    pub mismatch: f64,
    pub contrastive: f64,
}

pub fn combined_loss(terms: LossTerms, weights: &LossWeights) -> f64 {
    (terms.class_agnostic + terms.class_aware + terms.mismatch + weights.contrastive_weight * terms.contrastive)
        / weights.normalizer
}
