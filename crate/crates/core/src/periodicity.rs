//! Classical repetition counter built on a temporal self-similarity matrix.
//!
//! Features are z-normalized per dimension, turned into a row-softmax
//! similarity matrix, and each row is analysed spectrally: the dominant
//! period within `[2, T/2]` frames and the share of band power it carries
//! give a per-frame period and periodicity score. The earliest run of
//! periodic frames is the repetition segment, and the count integrates
//! `1 / period` over it.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::annotation::TimeSegment;
use crate::density::merged_runs;
use crate::features::FeatureSequence;
use crate::numeric::{median, round_count};

/// Stage-1 acceptance threshold on the mean periodicity score.
pub const CANDIDATE_THRESHOLD: f64 = 0.25;
/// Default per-frame score threshold for counting.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.25;
/// Shortest admissible period, in frames.
pub const MIN_PERIOD: f64 = 2.0;
/// Relative deviation from a run's median period beyond which a frame is
/// treated as off-period.
pub const PERIOD_TOLERANCE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PeriodicityError {
    #[error("all frames are identical; self-similarity is undefined")]
    Degenerate,
    #[error("temperature must be positive")]
    BadTemperature,
}

/// Row-stochastic T x T similarity matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
    pub temperature: f64,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

fn z_normalize(seq: &FeatureSequence) -> Result<Vec<Vec<f64>>, PeriodicityError> {
    let frames = seq.frames();
    let n = frames.len() as f64;
    let dim = seq.dim();
    let mut out = vec![vec![0.0; dim]; frames.len()];
    let mut any_varying = false;
    for d in 0..dim {
        let mean = frames.iter().map(|f| f[d]).sum::<f64>() / n;
        let var = frames.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / n;
        let scale = mean.abs().max(1.0);
        if var.sqrt() <= 1e-12 * scale {
            continue;
        }
        any_varying = true;
        let inv = 1.0 / var.sqrt();
        for (o, f) in out.iter_mut().zip(frames) {
            o[d] = (f[d] - mean) * inv;
        }
    }
    if any_varying {
        Ok(out)
    } else {
        Err(PeriodicityError::Degenerate)
    }
}

fn pairwise_sq_distances(z: &[Vec<f64>]) -> Vec<f64> {
    let n = z.len();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = z[i].iter().zip(&z[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }
    d2
}

/// Median heuristic: the median squared distance over distinct frame pairs.
fn median_temperature(d2: &[f64], n: usize) -> f64 {
    let upper: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| d2[i * n + j])
        .collect();
    let med = median(&upper).unwrap_or(0.0);
    if med > 0.0 {
        med
    } else {
        upper.iter().sum::<f64>() / upper.len().max(1) as f64
    }
}

/// Row-softmax of negative squared distances between z-normalized frames.
///
/// `temperature` defaults to the median pairwise squared distance.
pub fn self_similarity(seq: &FeatureSequence, temperature: Option<f64>) -> Result<SimilarityMatrix, PeriodicityError> {
    let z = z_normalize(seq)?;
    let n = z.len();
    let d2 = pairwise_sq_distances(&z);
    let temperature = match temperature {
        Some(t) if t.is_finite() && t > 0.0 => t,
        Some(_) => return Err(PeriodicityError::BadTemperature),
        None => median_temperature(&d2, n),
    };
    if !(temperature > 0.0) {
        return Err(PeriodicityError::Degenerate);
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let src = &d2[i * n..(i + 1) * n];
        let dst = &mut data[i * n..(i + 1) * n];
        // d2[i][i] = 0 is the row maximum of the logits, so no shift needed.
        let mut total = 0.0;
        for (o, d) in dst.iter_mut().zip(src) {
            *o = (-d / temperature).exp();
            total += *o;
        }
        dst.iter_mut().for_each(|o| *o /= total);
    }
    Ok(SimilarityMatrix { n, data, temperature })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodEstimate {
    /// Period in frames; 0 when the row is aperiodic.
    pub period: f64,
    /// Fraction of band power in the dominant spectral peak.
    pub score: f64,
}

impl PeriodEstimate {
    pub const APERIODIC: PeriodEstimate = PeriodEstimate { period: 0.0, score: 0.0 };
}

/// Reusable FFT state for rows of one length.
pub struct PeriodEstimator {
    len: usize,
    fft: Arc<dyn Fft<f64>>,
    min_period: f64,
    max_period: f64,
}

impl PeriodEstimator {
    pub fn new(len: usize) -> Self {
        Self::with_band(len, MIN_PERIOD, len as f64 / 2.0)
    }

    pub fn with_band(len: usize, min_period: f64, max_period: f64) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(len.max(1));
        Self {
            len,
            fft,
            min_period,
            max_period,
        }
    }

    /// Admissible frequency bins: periods in `[min_period, max_period]`,
    /// excluding DC and the Nyquist bin.
    fn band(&self) -> (usize, usize) {
        let n = self.len as f64;
        let lo = (n / self.max_period).ceil().max(1.0) as usize;
        let mut hi = (n / self.min_period).floor() as usize;
        if self.len % 2 == 0 {
            hi = hi.min(self.len / 2 - 1);
        } else {
            hi = hi.min(self.len / 2);
        }
        (lo, hi)
    }

    pub fn estimate(&self, row: &[f64]) -> PeriodEstimate {
        assert_eq!(row.len(), self.len, "row length does not match estimator");
        let n = self.len;
        if (n as f64) < 2.0 * self.min_period {
            return PeriodEstimate::APERIODIC;
        }
        let (lo, hi) = self.band();
        if lo > hi {
            return PeriodEstimate::APERIODIC;
        }
        let mean = row.iter().sum::<f64>() / n as f64;
        let mut buf: Vec<Complex64> = row.iter().map(|&x| Complex64::new(x - mean, 0.0)).collect();
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..=n / 2].iter().map(|c| c.norm_sqr()).collect();

        let total: f64 = power[lo..=hi].iter().sum();
        let peak_scale = power.iter().copied().fold(0.0, f64::max);
        if !(total > 1e-24 * peak_scale.max(1e-300)) || total <= 0.0 {
            return PeriodEstimate::APERIODIC;
        }

        // Largest spectral local maximum inside the band. A band-edge value
        // that is merely the shoulder of out-of-band power is not a peak.
        let at = |k: usize| power.get(k).copied().unwrap_or(0.0);
        let mut best: Option<usize> = None;
        for k in lo..=hi {
            let p = power[k];
            if p >= at(k - 1) && p >= at(k + 1) && best.is_none_or(|b| p > power[b]) {
                best = Some(k);
            }
        }
        let Some(k) = best else {
            return PeriodEstimate::APERIODIC;
        };
        if power[k] <= 0.0 {
            return PeriodEstimate::APERIODIC;
        }

        // Main lobe: the peak bin and its in-band neighbours.
        let lobe: f64 = (k.saturating_sub(1).max(lo)..=(k + 1).min(hi)).map(|j| power[j]).sum();
        let score = (lobe / total).clamp(0.0, 1.0);

        // Parabolic refinement of the peak location.
        let (a, b, c) = (at(k - 1), power[k], at(k + 1));
        let denom = a - 2.0 * b + c;
        let delta = if denom.abs() > 0.0 {
            (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let period = (n as f64 / (k as f64 + delta)).clamp(self.min_period, self.max_period);
        PeriodEstimate { period, score }
    }
}

/// Dominant period of `row` within `[min_period, max_period]` frames.
pub fn estimate_period(row: &[f64], min_period: f64, max_period: f64) -> PeriodEstimate {
    PeriodEstimator::with_band(row.len(), min_period, max_period).estimate(row)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicityResult {
    /// Per-frame period in frames; 0 for aperiodic frames.
    pub per_frame_period: Vec<f64>,
    pub per_frame_score: Vec<f64>,
    pub count: u32,
    pub segment: Option<TimeSegment>,
    /// Segment bounds as frame indices `[first, last + 1)`.
    pub segment_frames: Option<(usize, usize)>,
    pub mean_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterConfig {
    pub score_threshold: f64,
    /// Similarity temperature; `None` uses the median heuristic.
    pub temperature: Option<f64>,
    /// Inactive frames bridged when merging periodic runs. `None` uses
    /// 1.5x the median period of periodic frames.
    pub gap_frames: Option<usize>,
    /// Runs shorter than this many median periods are ignored.
    pub min_cycles: f64,
    /// Largest ratio of the squared distance one period away to the squared
    /// distance half a period away for a frame to count as recurring.
    pub recurrence_contrast: f64,
    /// Half-width of the moving average applied to features before
    /// building the similarity matrix.
    pub smoothing: usize,
}

impl Default for CounterConfig {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            temperature: None,
            gap_frames: None,
            min_cycles: 1.5,
            recurrence_contrast: 0.15,
            smoothing: 1,
        }
    }
}

/// Per-frame period and score for every row of the similarity matrix.
pub fn frame_periodicity(seq: &FeatureSequence, temperature: Option<f64>) -> Result<Vec<PeriodEstimate>, PeriodicityError> {
    let tsm = self_similarity(seq, temperature)?;
    let est = PeriodEstimator::new(tsm.size());
    Ok((0..tsm.size()).into_par_iter().map(|i| est.estimate(tsm.row(i))).collect())
}

/// Counts and localizes the earliest repetition in `seq`.
pub fn count_and_localize(seq: &FeatureSequence, config: &CounterConfig) -> Result<PeriodicityResult, PeriodicityError> {
    let tsm = self_similarity(&smooth(seq, config.smoothing), config.temperature)?;
    let est = PeriodEstimator::new(tsm.size());
    let estimates: Vec<PeriodEstimate> = (0..tsm.size()).into_par_iter().map(|i| est.estimate(tsm.row(i))).collect();
    let recurring: Vec<bool> = estimates
        .iter()
        .enumerate()
        .map(|(i, e)| recurs(&tsm, i, e.period, config.recurrence_contrast))
        .collect();
    Ok(localize(&estimates, &recurring, seq.fps(), config))
}

/// Squared distance between frames `i` and `j`, recovered from the softmax
/// ratio. Underflow reads as infinitely far.
fn recovered_distance(tsm: &SimilarityMatrix, i: usize, j: usize) -> f64 {
    let row = tsm.row(i);
    -tsm.temperature * (row[j] / row[i]).ln()
}

/// Centred moving average over `2 * half_width + 1` frames, truncated at
/// the ends.
pub fn smooth(seq: &FeatureSequence, half_width: usize) -> FeatureSequence {
    if half_width == 0 {
        return seq.clone();
    }
    let frames = seq.frames();
    let n = frames.len();
    let out = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half_width);
            let hi = (i + half_width + 1).min(n);
            let mut acc = vec![0.0; seq.dim()];
            for f in &frames[lo..hi] {
                acc.iter_mut().zip(f).for_each(|(a, x)| *a += x);
            }
            let k = (hi - lo) as f64;
            acc.iter_mut().for_each(|a| *a /= k);
            acc
        })
        .collect();
    FeatureSequence::new(out, seq.fps()).expect("averaging keeps a valid sequence")
}

/// Whether frame `i` re-occurs one period away: on some side, the nearest
/// frame within +-10% of the period lag is at most `contrast` times as far
/// (in squared distance) as the frame half a period away.
pub fn recurs(tsm: &SimilarityMatrix, i: usize, period: f64, contrast: f64) -> bool {
    if !(period >= MIN_PERIOD) {
        return false;
    }
    let n = tsm.size() as i64;
    let dist = |lag: i64| -> Option<f64> {
        let j = i as i64 + lag;
        (0..n).contains(&j).then(|| recovered_distance(tsm, i, j as usize))
    };
    let lag = period.round() as i64;
    let half = (period / 2.0).round() as i64;
    let slack = ((0.1 * period).round() as i64).max(1);
    [1i64, -1].iter().any(|&side| {
        let near = (lag - slack..=lag + slack)
            .filter_map(|l| dist(side * l))
            .fold(f64::INFINITY, f64::min);
        match dist(side * half) {
            Some(mid) if near.is_finite() => near <= contrast * mid,
            _ => false,
        }
    })
}

fn localize(estimates: &[PeriodEstimate], recurring: &[bool], fps: f64, config: &CounterConfig) -> PeriodicityResult {
    let n = estimates.len();
    let per_frame_period: Vec<f64> = estimates.iter().map(|e| e.period).collect();
    let per_frame_score: Vec<f64> = estimates.iter().map(|e| e.score).collect();
    let mean_score = per_frame_score.iter().sum::<f64>() / n.max(1) as f64;

    let periodic = |i: usize| recurring[i] && passes_threshold(estimates[i].score, config.score_threshold);
    let periods: Vec<f64> = (0..n).filter(|&i| periodic(i)).map(|i| estimates[i].period).collect();
    let gap = config
        .gap_frames
        .unwrap_or_else(|| median(&periods).map_or(crate::density::FALLBACK_GAP_FRAMES, |m| (1.5 * m).round() as usize));

    let mut chosen = None;
    for (mut first, mut end) in merged_runs(n, periodic, gap) {
        let run_periods: Vec<f64> = (first..end).filter(|&i| periodic(i)).map(|i| estimates[i].period).collect();
        let typical = median(&run_periods).unwrap_or(0.0);
        if typical <= 0.0 {
            continue;
        }
        let agrees = |i: usize| periodic(i) && (estimates[i].period / typical - 1.0).abs() <= PERIOD_TOLERANCE;
        while first < end && !agrees(first) {
            first += 1;
        }
        while end > first && !agrees(end - 1) {
            end -= 1;
        }
        if (end - first) as f64 >= config.min_cycles * typical {
            chosen = Some((first, end, typical));
            break;
        }
    }

    let mut result = PeriodicityResult {
        per_frame_period,
        per_frame_score,
        count: 0,
        segment: None,
        segment_frames: None,
        mean_score,
    };
    if let Some((first, end, typical)) = chosen {
        // Bridged or off-period frames take the run's typical period.
        let cycles: f64 = (first..end)
            .map(|i| {
                let p = estimates[i].period;
                if periodic(i) && (p / typical - 1.0).abs() <= PERIOD_TOLERANCE {
                    1.0 / p
                } else {
                    1.0 / typical
                }
            })
            .sum();
        let count = round_count(cycles);
        if count >= 1 {
            result.count = count;
            result.segment = Some(TimeSegment::new(first as f64 / fps, end as f64 / fps));
            result.segment_frames = Some((first, end));
        }
    }
    result
}

/// Mean per-frame periodicity score of a clip.
pub fn clip_score(seq: &FeatureSequence) -> Result<f64, PeriodicityError> {
    let estimates = frame_periodicity(seq, None)?;
    Ok(estimates.iter().map(|e| e.score).sum::<f64>() / estimates.len() as f64)
}

/// Stage-1 candidate test: mean periodicity score at or above `threshold`.
pub fn candidate_filter(seq: &FeatureSequence, threshold: f64) -> Result<bool, PeriodicityError> {
    Ok(passes_threshold(clip_score(seq)?, threshold))
}

/// Inclusive threshold comparison shared by every score gate.
pub fn passes_threshold(score: f64, threshold: f64) -> bool {
    score >= threshold
}

/// Operating point chosen from labelled positive/negative score samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub threshold: f64,
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
}

/// Threshold maximizing Youden's J (TPR - FPR) over the pooled scores.
pub fn calibrate_threshold(positive: &[f64], negative: &[f64]) -> Option<CalibrationPoint> {
    if positive.is_empty() || negative.is_empty() {
        return None;
    }
    let mut candidates: Vec<f64> = positive.iter().chain(negative).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let rate = |xs: &[f64], t: f64| xs.iter().filter(|&&x| passes_threshold(x, t)).count() as f64 / xs.len() as f64;
    candidates
        .into_iter()
        .map(|t| CalibrationPoint {
            threshold: t,
            true_positive_rate: rate(positive, t),
            false_positive_rate: rate(negative, t),
        })
        .max_by(|a, b| {
            let ja = a.true_positive_rate - a.false_positive_rate;
            let jb = b.true_positive_rate - b.false_positive_rate;
            // prefer the lower threshold on ties (higher recall)
            ja.total_cmp(&jb).then(b.threshold.total_cmp(&a.threshold))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, generate_noise, SynthSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rows_are_stochastic() {
        let seq = generate_noise(50, 4, 10.0, 3).unwrap();
        let m = self_similarity(&seq, None).unwrap();
        for i in 0..m.size() {
            let s: f64 = m.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_input() {
        let seq = FeatureSequence::new(vec![vec![1.0, 2.0]; 10], 10.0).unwrap();
        assert_eq!(self_similarity(&seq, None), Err(PeriodicityError::Degenerate));
        assert_eq!(
            count_and_localize(&seq, &CounterConfig::default()).unwrap_err(),
            PeriodicityError::Degenerate
        );
        let ok = generate_noise(10, 2, 10.0, 0).unwrap();
        assert_eq!(self_similarity(&ok, Some(-1.0)), Err(PeriodicityError::BadTemperature));
    }

    #[test]
    fn near_uniform_rows_for_constant_plus_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = (0..64)
            .map(|_| (0..32).map(|_| 5.0 + 1e-3 * rng.random::<f64>()).collect())
            .collect();
        let seq = FeatureSequence::new(frames, 10.0).unwrap();
        let m = self_similarity(&seq, None).unwrap();
        // off-diagonal entries stay within a small factor of uniform
        let uniform = 1.0 / 64.0;
        for i in 0..64 {
            for j in 0..64 {
                if i != j {
                    let v = m.get(i, j);
                    assert!(v > 0.1 * uniform && v < 3.0 * uniform, "{v}");
                }
            }
        }
    }

    #[test]
    fn periodic_rows_peak_at_period_multiples() {
        let spec = SynthSpec {
            count: 10,
            period: 20.0,
            onset: 0,
            total_frames: 200,
            ..Default::default()
        };
        let (seq, _) = generate(&spec).unwrap();
        let m = self_similarity(&seq, None).unwrap();
        let row = m.row(50);
        for k in [-2i64, -1, 1, 2] {
            let j = (50 + 20 * k) as usize;
            assert!((row[j] - row[50]).abs() < 1e-9, "offset {k}");
        }
        assert!(row[60] < row[50]);
    }

    #[test]
    fn cosine_period() {
        let row: Vec<f64> = (0..200).map(|t| (2.0 * std::f64::consts::PI * t as f64 / 20.0).cos()).collect();
        let est = estimate_period(&row, 2.0, 100.0);
        assert!((est.period - 20.0).abs() <= 0.5, "{est:?}");
        assert!(est.score > 0.9);
        let reversed: Vec<f64> = row.iter().rev().copied().collect();
        let rev = estimate_period(&reversed, 2.0, 100.0);
        assert!((rev.period - est.period).abs() < 1e-9);
    }

    #[test]
    fn off_bin_cosine_is_refined() {
        let row: Vec<f64> = (0..320).map(|t| (2.0 * std::f64::consts::PI * t as f64 / 23.3).sin()).collect();
        let est = estimate_period(&row, 2.0, 160.0);
        assert!((est.period - 23.3).abs() < 0.6, "{est:?}");
    }

    #[test]
    fn zero_row_is_aperiodic() {
        assert_eq!(estimate_period(&[0.0; 64], 2.0, 32.0), PeriodEstimate::APERIODIC);
        assert_eq!(estimate_period(&[3.0; 64], 2.0, 32.0), PeriodEstimate::APERIODIC);
        assert_eq!(estimate_period(&[1.0, 2.0, 3.0], 2.0, 1.5), PeriodEstimate::APERIODIC);
    }

    #[test]
    fn white_noise_rows_score_low() {
        let mut low = 0;
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let row: Vec<f64> = (0..320).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            if estimate_period(&row, 2.0, 160.0).score < 0.3 {
                low += 1;
            }
        }
        assert!(low >= 990, "{low}/1000");
    }

    #[test]
    fn candidate_threshold_is_inclusive() {
        assert!(passes_threshold(0.3, 0.25));
        assert!(passes_threshold(0.25, 0.25));
        assert!(!passes_threshold(0.1, 0.25));
    }

    #[test]
    fn zero_threshold_accepts_everything_scored() {
        let (seq, _) = generate(&SynthSpec::default()).unwrap();
        assert!(candidate_filter(&seq, 0.0).unwrap());
    }

    #[test]
    fn counts_clean_synthetic_sequence() {
        let spec = SynthSpec {
            count: 10,
            period: 20.0,
            onset: 40,
            total_frames: 300,
            ..Default::default()
        };
        let (seq, truth) = generate(&spec).unwrap();
        let r = count_and_localize(&seq, &CounterConfig::default()).unwrap();
        assert!(r.count.abs_diff(10) <= 1, "count {}", r.count);
        let iou = crate::consistency::segment_iou(&r.segment.unwrap(), &truth.segment);
        assert!(iou >= 0.7, "iou {iou}");
        assert!(r.per_frame_period.iter().all(|&p| p == 0.0 || p < 150.0));
    }

    #[test]
    fn calibration_separates_classes() {
        let pos = [0.6, 0.7, 0.8, 0.5];
        let neg = [0.1, 0.2, 0.15, 0.3];
        let cp = calibrate_threshold(&pos, &neg).unwrap();
        assert_eq!(cp.threshold, 0.5);
        assert_eq!(cp.true_positive_rate, 1.0);
        assert_eq!(cp.false_positive_rate, 0.0);
        assert!(calibrate_threshold(&[], &neg).is_none());
    }
}
