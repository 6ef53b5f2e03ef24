//! Counting and segmentation metrics: MAE, OBOE, OBZE, RMSE and segment IOU.

use serde::{Deserialize, Serialize};

use crate::annotation::TimeSegment;
use crate::consistency::segment_iou;
use crate::numeric::pairwise_sum;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub predicted_count: u32,
    pub true_count: u32,
    #[serde(default)]
    pub predicted_segment: Option<TimeSegment>,
    /// Absent for mismatched-conditioning rows, which have no repetition.
    #[serde(default)]
    pub true_segment: Option<TimeSegment>,
    /// Row evaluates a counter conditioned on text that does not match the
    /// clip; the expected count is 0.
    #[serde(default)]
    pub mismatched: bool,
}

impl EvalPair {
    pub fn new(predicted_count: u32, true_count: u32, predicted_segment: Option<TimeSegment>, true_segment: TimeSegment) -> Self {
        Self {
            predicted_count,
            true_count,
            predicted_segment,
            true_segment: Some(true_segment),
            mismatched: false,
        }
    }

    pub fn mismatched(predicted_count: u32) -> Self {
        Self {
            predicted_count,
            true_count: 0,
            predicted_segment: None,
            true_segment: None,
            mismatched: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Errors divided by the true count.
    #[default]
    ByTruth,
    /// Raw count differences.
    Absolute,
}

impl std::str::FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "by-truth" => Ok(Normalization::ByTruth),
            "absolute" => Ok(Normalization::Absolute),
            other => Err(format!("unknown normalization `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub oboe: f64,
    pub obze: f64,
    pub rmse: f64,
    pub iou: f64,
    pub n: usize,
    /// Rows that contributed to `iou` (those with a true segment).
    pub iou_rows: usize,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot evaluate an empty set of pairs")]
    Empty,
    #[error("row {0} has a zero true count, which cannot be normalized by truth")]
    ZeroTruth(usize),
    #[error("cannot pick the earliest of zero segments")]
    NoSegments,
}

/// Aggregates the five metrics over `pairs`.
///
/// A missing predicted segment scores IOU 0. Sums use fixed-order pairwise
/// summation so the result does not depend on platform or chunking.
pub fn evaluate(pairs: &[EvalPair], normalization: Normalization) -> Result<MetricReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    if normalization == Normalization::ByTruth {
        if let Some(i) = pairs.iter().position(|p| p.true_count == 0) {
            return Err(MetricsError::ZeroTruth(i));
        }
    }

    let n = pairs.len();
    let mut abs_err = Vec::with_capacity(n);
    let mut sq_err = Vec::with_capacity(n);
    let mut off_by_one = Vec::with_capacity(n);
    let mut off_by_zero = Vec::with_capacity(n);
    let mut ious = Vec::with_capacity(n);

    for p in pairs {
        let diff = p.predicted_count.abs_diff(p.true_count) as f64;
        let err = match normalization {
            Normalization::ByTruth => diff / p.true_count as f64,
            Normalization::Absolute => diff,
        };
        abs_err.push(err);
        sq_err.push(err * err);
        off_by_one.push(if diff > 1.0 { 1.0 } else { 0.0 });
        off_by_zero.push(if diff > 0.0 { 1.0 } else { 0.0 });
        if let Some(truth) = &p.true_segment {
            ious.push(p.predicted_segment.as_ref().map_or(0.0, |pred| segment_iou(pred, truth)));
        }
    }

    let nf = n as f64;
    Ok(MetricReport {
        mae: pairwise_sum(&abs_err) / nf,
        oboe: pairwise_sum(&off_by_one) / nf,
        obze: pairwise_sum(&off_by_zero) / nf,
        rmse: (pairwise_sum(&sq_err) / nf).sqrt(),
        iou: if ious.is_empty() {
            0.0
        } else {
            pairwise_sum(&ious) / ious.len() as f64
        },
        n,
        iou_rows: ious.len(),
        normalization,
    })
}

/// The segment that starts first; ties go to the one that ends first.
pub fn earliest_segment_rule(segments: &[TimeSegment]) -> Result<TimeSegment, MetricsError> {
    segments
        .iter()
        .copied()
        .min_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)))
        .ok_or(MetricsError::NoSegments)
}

/// Renders a report as a one-row table in `MAE OBOE OBZE RMSE IOU` order.
pub fn format_table(report: &MetricReport) -> String {
    format!(
        "{:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
        "MAE", "OBOE", "OBZE", "RMSE", "IOU", report.mae, report.oboe, report.obze, report.rmse, report.iou
    )
}
