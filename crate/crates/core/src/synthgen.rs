//! Seeded synthetic repetition sequences with exact ground truth.
//!
//! A smooth random prototype cycle is repeated `count` times (each cycle's
//! length jittered independently), embedded in a slowly drifting
//! non-periodic background, and corrupted with white noise at a given SNR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotation::TimeSegment;
use crate::features::{FeatureError, FeatureSequence};

/// Samples per prototype cycle before interpolation.
const PROTOTYPE_SAMPLES: usize = 64;
/// Per-frame step of the background random walk, relative to the unit-RMS
/// prototype.
const BACKGROUND_STEP: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: u32,
    /// Nominal cycle length in frames.
    pub period: f64,
    /// Maximum relative deviation of each cycle length from `period`.
    pub jitter: f64,
    /// First frame of the repeating segment.
    pub onset: usize,
    /// Signal-to-noise ratio in dB; `f64::INFINITY` for no noise.
    pub noise_snr_db: f64,
    pub dim: usize,
    pub total_frames: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 10,
            period: 20.0,
            jitter: 0.0,
            onset: 40,
            noise_snr_db: f64::INFINITY,
            dim: 16,
            total_frames: 300,
            fps: 30.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub count: u32,
    pub segment: TimeSegment,
    /// Segment bounds in (fractional) frames.
    pub segment_frames: (f64, f64),
    /// Midpoint of each cycle, in frames.
    pub per_cycle_midpoints: Vec<f64>,
    pub fps: f64,
    pub total_frames: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("infeasible spec: {0}")]
    Infeasible(String),
}

impl From<FeatureError> for SynthError {
    fn from(e: FeatureError) -> Self {
        SynthError::Infeasible(e.to_string())
    }
}

impl SynthSpec {
    pub fn check(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Infeasible(m));
        if self.count < 2 {
            return bad(format!("count {} < 2", self.count));
        }
        if !(self.period >= 4.0) {
            return bad(format!("period {} < 4 frames", self.period));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad(format!("jitter {} outside [0, 1)", self.jitter));
        }
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad("fps must be positive".into());
        }
        if self.noise_snr_db.is_nan() {
            return bad("snr is NaN".into());
        }
        let span = self.onset as f64 + self.count as f64 * self.period * (1.0 + self.jitter);
        if span > self.total_frames as f64 {
            return bad(format!(
                "onset + count*period*(1+jitter) = {span} exceeds {} frames",
                self.total_frames
            ));
        }
        Ok(())
    }
}

/// Closed smooth loop: white noise integrated twice on a circle.
fn prototype(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut dims = Vec::with_capacity(dim);
    for _ in 0..dim {
        let mut x: Vec<f64> = (0..PROTOTYPE_SAMPLES).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let mut acc = 0.0;
            for v in x.iter_mut() {
                acc += *v - mean;
                *v = acc;
            }
        }
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        x.iter_mut().for_each(|v| *v -= mean);
        dims.push(x);
    }
    // unit RMS over the whole loop
    let energy: f64 = dims.iter().flatten().map(|v| v * v).sum::<f64>() / (dim * PROTOTYPE_SAMPLES) as f64;
    let scale = if energy > 0.0 { 1.0 / energy.sqrt() } else { 1.0 };
    // transpose to sample-major
    (0..PROTOTYPE_SAMPLES)
        .map(|s| dims.iter().map(|d| d[s] * scale).collect())
        .collect()
}

fn sample_loop(proto: &[Vec<f64>], phase: f64) -> Vec<f64> {
    let n = proto.len();
    let pos = phase.rem_euclid(1.0) * n as f64;
    let i0 = pos.floor() as usize % n;
    let i1 = (i0 + 1) % n;
    let frac = pos - pos.floor();
    if frac == 0.0 {
        return proto[i0].clone();
    }
    proto[i0]
        .iter()
        .zip(&proto[i1])
        .map(|(a, b)| a + frac * (b - a))
        .collect()
}

/// Builds the sequence and its ground truth. Bit-identical for equal specs.
pub fn generate(spec: &SynthSpec) -> Result<(FeatureSequence, SynthTruth), SynthError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let proto = prototype(&mut rng, spec.dim);

    let lengths: Vec<f64> = (0..spec.count)
        .map(|_| {
            if spec.jitter > 0.0 {
                spec.period * rng.random_range(1.0 - spec.jitter..=1.0 + spec.jitter)
            } else {
                spec.period
            }
        })
        .collect();
    let mut starts = Vec::with_capacity(lengths.len());
    let mut t0 = spec.onset as f64;
    for len in &lengths {
        starts.push(t0);
        t0 += len;
    }
    let seg_end = t0;

    // Background: random walk started away from the prototype loop.
    let step = Normal::new(0.0, BACKGROUND_STEP).expect("valid std");
    let mut pos: Vec<f64> = (0..spec.dim).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut frames = Vec::with_capacity(spec.total_frames);
    for t in 0..spec.total_frames {
        for p in pos.iter_mut() {
            *p += step.sample(&mut rng);
        }
        let tf = t as f64;
        if tf >= spec.onset as f64 && tf < seg_end {
            let k = starts.partition_point(|&s| s <= tf) - 1;
            let phase = (tf - starts[k]) / lengths[k];
            frames.push(sample_loop(&proto, phase));
        } else {
            frames.push(pos.clone());
        }
    }

    if spec.noise_snr_db.is_finite() {
        let n = frames.len() as f64;
        let mut power = 0.0;
        for d in 0..spec.dim {
            let mean = frames.iter().map(|f| f[d]).sum::<f64>() / n;
            power += frames.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / n;
        }
        power /= spec.dim as f64;
        let sigma = (power / 10f64.powf(spec.noise_snr_db / 10.0)).sqrt();
        let noise = Normal::new(0.0, sigma).map_err(|e| SynthError::Infeasible(e.to_string()))?;
        for f in frames.iter_mut() {
            for v in f.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }

    let truth = SynthTruth {
        count: spec.count,
        segment: TimeSegment::new(spec.onset as f64 / spec.fps, seg_end / spec.fps),
        segment_frames: (spec.onset as f64, seg_end),
        per_cycle_midpoints: starts.iter().zip(&lengths).map(|(s, l)| s + l / 2.0).collect(),
        fps: spec.fps,
        total_frames: spec.total_frames,
    };
    Ok((FeatureSequence::new(frames, spec.fps)?, truth))
}

/// White Gaussian features with no repetition at all.
pub fn generate_noise(total_frames: usize, dim: usize, fps: f64, seed: u64) -> Result<FeatureSequence, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..total_frames)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    Ok(FeatureSequence::new(frames, fps)?)
}
