use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{tokenize, ClipRecord, Split};

/// Which annotations contribute to a statistics row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsFilter {
    Train,
    /// Train-split annotations flagged as agreeing with another rater.
    ConsistentTrain,
    Test,
    All,
}

impl std::str::FromStr for StatsFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(StatsFilter::Train),
            "consistent-train" | "consistent_train" => Ok(StatsFilter::ConsistentTrain),
            "test" => Ok(StatsFilter::Test),
            "all" => Ok(StatsFilter::All),
            other => Err(format!("unknown split filter `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub avg: f64,
    pub min: f64,
    pub max: f64,
}

impl Triple {
    fn of(values: &[f64]) -> Triple {
        let sum: f64 = values.iter().sum();
        Triple {
            avg: sum / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_videos: usize,
    pub num_annotations: usize,
    /// Repetition segment duration in seconds.
    pub duration: Triple,
    pub count: Triple,
    /// Description length in words.
    pub text_length: Triple,
    pub vocab_size: usize,
    pub total_words: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("no annotations match the selected split")]
    EmptySelection,
}

/// Table-style statistics over the annotations selected by `filter`.
pub fn compute_stats(records: &[ClipRecord], filter: StatsFilter) -> Result<DatasetStats, StatsError> {
    let mut videos = HashSet::new();
    let mut durations = Vec::new();
    let mut counts = Vec::new();
    let mut lengths = Vec::new();
    let mut vocab: HashSet<String> = HashSet::new();
    let mut total_words = 0usize;

    for record in records {
        let split_ok = match filter {
            StatsFilter::Train | StatsFilter::ConsistentTrain => record.split == Split::Train,
            StatsFilter::Test => record.split == Split::Test,
            StatsFilter::All => true,
        };
        if !split_ok {
            continue;
        }
        for a in &record.annotations {
            if filter == StatsFilter::ConsistentTrain && !a.agreement.unwrap_or(record.consistent) {
                continue;
            }
            videos.insert(record.key());
            durations.push(a.segment.duration());
            counts.push(a.count as f64);
            let tokens = tokenize(&a.description);
            lengths.push(tokens.len() as f64);
            total_words += tokens.len();
            vocab.extend(tokens);
        }
    }

    if durations.is_empty() {
        return Err(StatsError::EmptySelection);
    }
    Ok(DatasetStats {
        num_videos: videos.len(),
        num_annotations: durations.len(),
        duration: Triple::of(&durations),
        count: Triple::of(&counts),
        text_length: Triple::of(&lengths),
        vocab_size: vocab.len(),
        total_words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{Annotation, Source, TimeSegment};

    fn rec(id: &str, split: Split, anns: &[(&str, f64, f64, u32)]) -> ClipRecord {
        let mut r = ClipRecord::candidate(Source::Kinetics, id, None);
        r.split = split;
        for (i, (d, s, e, c)) in anns.iter().enumerate() {
            r.annotations
                .push(Annotation::new(*d, TimeSegment::new(*s, *e), *c, format!("r{i}")));
        }
        r
    }

    #[test]
    fn single_annotation_triples_collapse() {
        let s = compute_stats(&[rec("a", Split::Train, &[("cut", 0.0, 10.0, 2)])], StatsFilter::All).unwrap();
        assert_eq!(s.duration, Triple { avg: 10.0, min: 10.0, max: 10.0 });
        assert_eq!(s.count.avg, 2.0);
        assert_eq!(s.num_videos, 1);
    }

    #[test]
    fn vocab_counts_distinct_tokens() {
        let r = rec("a", Split::Train, &[("a b", 0.0, 1.0, 2), ("b c", 0.0, 1.0, 2)]);
        let s = compute_stats(&[r], StatsFilter::Train).unwrap();
        assert_eq!(s.vocab_size, 3);
        assert_eq!(s.total_words, 4);
        assert_eq!(s.text_length.avg, 2.0);
        assert_eq!(s.num_annotations, 2);
        assert_eq!(s.num_videos, 1);
    }

    #[test]
    fn empty_selection_is_an_error() {
        let r = rec("a", Split::Train, &[("a b", 0.0, 1.0, 2)]);
        assert_eq!(compute_stats(&[r], StatsFilter::Test), Err(StatsError::EmptySelection));
        assert_eq!(compute_stats(&[], StatsFilter::All), Err(StatsError::EmptySelection));
    }

    #[test]
    fn consistent_train_uses_agreement_flags() {
        let mut r = rec("a", Split::Train, &[("x", 0.0, 1.0, 2), ("y", 0.0, 1.0, 3)]);
        r.annotations[0].agreement = Some(true);
        r.annotations[1].agreement = Some(false);
        let s = compute_stats(&[r], StatsFilter::ConsistentTrain).unwrap();
        assert_eq!(s.num_annotations, 1);
        assert_eq!(s.count.max, 2.0);
    }
}
