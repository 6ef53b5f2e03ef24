//! Inter-rater agreement, disagreement resolution and train/test splitting.
//!
//! Two annotations agree when their segments overlap by at least the policy
//! IOU and their counts differ by at most `max_count_delta`. Any two-rater
//! disagreement escalates to a third rater; with three raters the clip is
//! consistent iff some pair agrees.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{Annotation, ClipRecord, ClipState, Source, Split, TimeSegment};

/// Name of the rule used to pick the canonical annotation, reported with
/// every resolution so downstream consumers can tell how ground truth was
/// chosen.
pub const CANONICAL_RULE: &str = "rounded-mean-count, earliest on tie";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementPolicy {
    pub iou_threshold: f64,
    pub max_count_delta: u32,
}

impl Default for AgreementPolicy {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            max_count_delta: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConsistencyError {
    #[error("iou threshold must be in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("resolution needs 2 or 3 annotations, got {0}")]
    WrongArity(usize),
    #[error("train fraction must be in (0, 1), got {0}")]
    BadTrainFraction(f64),
}

impl AgreementPolicy {
    pub fn new(iou_threshold: f64, max_count_delta: u32) -> Result<Self, ConsistencyError> {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(ConsistencyError::BadThreshold(iou_threshold));
        }
        Ok(Self {
            iou_threshold,
            max_count_delta,
        })
    }
}

/// Length of intersection over length of union; 0 for disjoint segments.
pub fn segment_iou(a: &TimeSegment, b: &TimeSegment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.duration() + b.duration() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn agree(a: &Annotation, b: &Annotation, policy: &AgreementPolicy) -> bool {
    segment_iou(&a.segment, &b.segment) >= policy.iou_threshold
        && a.count.abs_diff(b.count) <= policy.max_count_delta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Consistent,
    NeedsThirdRater,
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionOutcome {
    pub verdict: Verdict,
    /// Rater ids of the agreeing pair, in submission order.
    pub agreeing_pair: Option<(String, String)>,
    /// Index (into the resolved list) of each member of the agreeing pair.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub agreeing_indices: Option<(usize, usize)>,
    pub canonical: Option<Annotation>,
}

impl ResolutionOutcome {
    fn unresolved(verdict: Verdict) -> Self {
        Self {
            verdict,
            agreeing_pair: None,
            agreeing_indices: None,
            canonical: None,
        }
    }
}

/// Picks ground truth from an agreeing pair: the annotation whose count is
/// closest to the pair's rounded mean count, the earlier one on ties.
fn canonical_of<'a>(first: &'a Annotation, second: &'a Annotation) -> &'a Annotation {
    let mean = crate::numeric::round_count((first.count as f64 + second.count as f64) / 2.0);
    if second.count.abs_diff(mean) < first.count.abs_diff(mean) {
        second
    } else {
        first
    }
}

/// Resolves two or three annotations of one clip, given in submission order.
pub fn resolve(annotations: &[Annotation], policy: &AgreementPolicy) -> Result<ResolutionOutcome, ConsistencyError> {
    let n = annotations.len();
    if !(2..=3).contains(&n) {
        return Err(ConsistencyError::WrongArity(n));
    }
    // Lexicographic pair order: (0,1), (0,2), (1,2).
    let pairs: &[(usize, usize)] = if n == 2 { &[(0, 1)] } else { &[(0, 1), (0, 2), (1, 2)] };
    for &(i, j) in pairs {
        let (a, b) = (&annotations[i], &annotations[j]);
        if agree(a, b, policy) {
            return Ok(ResolutionOutcome {
                verdict: Verdict::Consistent,
                agreeing_pair: Some((a.rater_id.clone(), b.rater_id.clone())),
                agreeing_indices: Some((i, j)),
                canonical: Some(canonical_of(a, b).clone()),
            });
        }
    }
    Ok(ResolutionOutcome::unresolved(if n == 2 {
        Verdict::NeedsThirdRater
    } else {
        Verdict::Inconsistent
    }))
}

/// Applies a final (Consistent or Inconsistent) outcome to a record: marks it
/// resolved and stamps every annotation with the clip-level verdict.
pub fn finalize(record: &mut ClipRecord, outcome: &ResolutionOutcome) {
    let consistent = outcome.verdict == Verdict::Consistent;
    record.consistent = consistent;
    record.state = ClipState::Resolved;
    for a in &mut record.annotations {
        a.agreement = Some(consistent);
    }
}

/// Assigns Train/Test to resolved records.
///
/// Only consistent records may go to Test. Kinetics records whose video id is
/// in `upstream_test` are forced to Test when consistent. The remaining Test
/// quota, `round((1 - train_fraction) * n_resolved)`, is filled by a seeded
/// shuffle of the eligible records, ordered by clip key so the outcome does
/// not depend on input order. Records that are not resolved stay unassigned.
pub fn assign_splits(
    records: &mut [ClipRecord],
    train_fraction: f64,
    seed: u64,
    upstream_test: Option<&HashSet<String>>,
) -> Result<(), ConsistencyError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ConsistencyError::BadTrainFraction(train_fraction));
    }
    let resolved: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].state == ClipState::Resolved)
        .collect();
    let target_test = ((1.0 - train_fraction) * resolved.len() as f64).round() as usize;

    let mut forced = 0usize;
    let mut eligible = Vec::new();
    for &i in &resolved {
        let r = &mut records[i];
        r.split = Split::Train;
        if !r.consistent {
            continue;
        }
        let upstream = r.source == Source::Kinetics
            && upstream_test.is_some_and(|set| set.contains(&r.video_id));
        if upstream {
            r.split = Split::Test;
            forced += 1;
        } else {
            eligible.push(i);
        }
    }

    eligible.sort_by(|&a, &b| records[a].key().cmp(&records[b].key()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let quota = target_test.saturating_sub(forced).min(eligible.len());
    for &i in &eligible[..quota] {
        records[i].split = Split::Test;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(start: f64, end: f64, count: u32, rater: &str) -> Annotation {
        Annotation::new("cutting", TimeSegment::new(start, end), count, rater)
    }

    #[test]
    fn iou_examples() {
        let s = |a, b| TimeSegment::new(a, b);
        assert_eq!(segment_iou(&s(1.0, 3.0), &s(1.0, 3.0)), 1.0);
        assert_eq!(segment_iou(&s(0.0, 2.0), &s(5.0, 7.0)), 0.0);
        assert!((segment_iou(&s(0.0, 4.0), &s(2.0, 6.0)) - 2.0 / 6.0).abs() < 1e-12);
        // touching segments
        assert_eq!(segment_iou(&s(0.0, 2.0), &s(2.0, 4.0)), 0.0);
    }

    #[test]
    fn agreement_examples() {
        let p = AgreementPolicy::default();
        assert!(agree(&ann(1.0, 5.0, 4, "a"), &ann(1.5, 5.0, 5, "b"), &p));
        assert!(!agree(&ann(1.0, 5.0, 4, "a"), &ann(1.0, 5.0, 6, "b"), &p));
        assert!(!agree(&ann(0.0, 2.0, 3, "a"), &ann(3.0, 5.0, 3, "b"), &p));
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = AgreementPolicy::default();
        // intersection 2, union 4 -> exactly 0.5
        assert!(agree(&ann(0.0, 4.0, 4, "a"), &ann(0.0, 2.0, 5, "b"), &p));
    }

    #[test]
    fn policy_bounds() {
        assert!(AgreementPolicy::new(0.0, 1).is_err());
        assert!(AgreementPolicy::new(1.1, 1).is_err());
        assert!(AgreementPolicy::new(1.0, 0).is_ok());
    }

    #[test]
    fn two_agreeing_raters() {
        let out = resolve(&[ann(1.0, 5.0, 4, "a"), ann(1.2, 5.0, 5, "b")], &AgreementPolicy::default()).unwrap();
        assert_eq!(out.verdict, Verdict::Consistent);
        assert_eq!(out.agreeing_pair, Some(("a".into(), "b".into())));
        // mean 4.5 rounds to 5 -> rater b
        assert_eq!(out.canonical.unwrap().rater_id, "b");
    }

    #[test]
    fn equal_counts_pick_earlier() {
        let out = resolve(&[ann(1.0, 5.0, 4, "a"), ann(1.2, 5.0, 4, "b")], &AgreementPolicy::default()).unwrap();
        assert_eq!(out.canonical.unwrap().rater_id, "a");
    }

    #[test]
    fn count_disagreement_needs_third_rater() {
        // IOU 0.8, counts 4 vs 7
        let out = resolve(&[ann(1.0, 6.0, 4, "a"), ann(1.0, 5.0, 7, "b")], &AgreementPolicy::default()).unwrap();
        assert_eq!(out.verdict, Verdict::NeedsThirdRater);
        assert!(out.canonical.is_none() && out.agreeing_pair.is_none());
    }

    #[test]
    fn segment_disagreement_also_escalates() {
        let out = resolve(&[ann(0.0, 2.0, 4, "a"), ann(5.0, 7.0, 4, "b")], &AgreementPolicy::default()).unwrap();
        assert_eq!(out.verdict, Verdict::NeedsThirdRater);
    }

    #[test]
    fn three_raters() {
        let p = AgreementPolicy::default();
        let none = [ann(0.0, 2.0, 3, "a"), ann(4.0, 6.0, 3, "b"), ann(7.0, 9.0, 3, "c")];
        assert_eq!(resolve(&none, &p).unwrap().verdict, Verdict::Inconsistent);
        let late = [ann(0.0, 2.0, 3, "a"), ann(4.0, 6.0, 3, "b"), ann(4.0, 6.0, 4, "c")];
        let out = resolve(&late, &p).unwrap();
        assert_eq!(out.verdict, Verdict::Consistent);
        assert_eq!(out.agreeing_indices, Some((1, 2)));
        let all = [ann(0.0, 2.0, 3, "a"), ann(0.0, 2.0, 3, "b"), ann(0.0, 2.0, 3, "c")];
        assert_eq!(resolve(&all, &p).unwrap().agreeing_indices, Some((0, 1)));
    }

    #[test]
    fn wrong_arity() {
        let p = AgreementPolicy::default();
        assert_eq!(resolve(&[ann(0.0, 1.0, 2, "a")], &p), Err(ConsistencyError::WrongArity(1)));
        let four = vec![ann(0.0, 1.0, 2, "a"); 4];
        assert_eq!(resolve(&four, &p), Err(ConsistencyError::WrongArity(4)));
    }

    fn resolved(id: &str, consistent: bool) -> ClipRecord {
        let mut r = ClipRecord::candidate(Source::Kinetics, id, None);
        r.state = ClipState::Resolved;
        r.consistent = consistent;
        r
    }

    #[test]
    fn splits_are_eighty_twenty_and_stable() {
        let mk = || (0..10).map(|i| resolved(&format!("v{i}"), true)).collect::<Vec<_>>();
        let mut a = mk();
        let mut b = mk();
        b.reverse();
        assign_splits(&mut a, 0.8, 7, None).unwrap();
        assign_splits(&mut b, 0.8, 7, None).unwrap();
        let test_ids = |rs: &[ClipRecord]| {
            let mut v: Vec<String> = rs.iter().filter(|r| r.split == Split::Test).map(|r| r.video_id.clone()).collect();
            v.sort();
            v
        };
        assert_eq!(test_ids(&a).len(), 2);
        assert_eq!(a.iter().filter(|r| r.split == Split::Train).count(), 8);
        assert_eq!(test_ids(&a), test_ids(&b));
    }

    #[test]
    fn inconsistent_records_always_train() {
        let mut rs: Vec<ClipRecord> = (0..10).map(|i| resolved(&format!("v{i}"), i % 2 == 0)).collect();
        for seed in 0..20 {
            assign_splits(&mut rs, 0.5, seed, None).unwrap();
            for r in &rs {
                if !r.consistent {
                    assert_eq!(r.split, Split::Train);
                }
            }
        }
    }

    #[test]
    fn upstream_test_partition_forces_test() {
        let mut rs: Vec<ClipRecord> = (0..10).map(|i| resolved(&format!("v{i}"), true)).collect();
        rs[9].consistent = false;
        let upstream: HashSet<String> = ["v3".to_string(), "v9".to_string()].into();
        assign_splits(&mut rs, 0.8, 1, Some(&upstream)).unwrap();
        assert_eq!(rs[3].split, Split::Test);
        assert_eq!(rs[9].split, Split::Train);
        assert_eq!(rs.iter().filter(|r| r.split == Split::Test).count(), 2);
    }

    #[test]
    fn train_fraction_bounds() {
        let mut rs = vec![resolved("v", true)];
        assert!(assign_splits(&mut rs, 1.0, 0, None).is_err());
        assert!(assign_splits(&mut rs, 0.0, 0, None).is_err());
    }

    #[test]
    fn unresolved_records_stay_unassigned() {
        let mut rs = vec![resolved("a", true), ClipRecord::candidate(Source::Kinetics, "b", None)];
        assign_splits(&mut rs, 0.5, 0, None).unwrap();
        assert_eq!(rs[1].split, Split::Unassigned);
    }
}
