//! End-to-end curation run with per-stage checkpoints.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::StageLog;
use super::llm::{narration_filter, FilterDecision, LlmClient, RetryPolicy};
use super::panel::{PanelError, RaterPanel};
use super::{remove_overlaps, NarrationCandidate};
use crate::annotation::{Annotation, ClipRecord, ClipState, Source};
use crate::consistency::{assign_splits, finalize, resolve, AgreementPolicy, Verdict};
use crate::features::FeatureSequence;
use crate::periodicity::{self, CANDIDATE_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Filter = 1,
    Validity = 2,
    Annotation = 3,
    Resolution = 4,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Filter => "candidate filter",
            Stage::Validity => "validity",
            Stage::Annotation => "annotation",
            Stage::Resolution => "resolution",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" => Ok(Stage::Filter),
            "2" => Ok(Stage::Validity),
            "3" => Ok(Stage::Annotation),
            "4" | "all" => Ok(Stage::Resolution),
            other => Err(format!("unknown stage `{other}` (expected 1-4 or all)")),
        }
    }
}

/// Where a Kinetics-style clip's features live.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureRef {
    Path(PathBuf),
    Inline(FeatureSequence),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExoClip {
    pub video_id: String,
    pub features: FeatureRef,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineInput {
    Narrations(Vec<NarrationCandidate>),
    Features(Vec<ExoClip>),
}

impl PipelineInput {
    fn len(&self) -> usize {
        match self {
            PipelineInput::Narrations(v) => v.len(),
            PipelineInput::Features(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Clips sent for manual labeling; `None` sends every candidate.
    pub manual_sample: Option<usize>,
    pub seed: u64,
    pub train_fraction: f64,
    pub candidate_threshold: f64,
    pub policy: AgreementPolicy,
    pub retry: RetryPolicy,
    /// Last stage to run.
    pub stop_after: Stage,
    pub checkpoint_dir: Option<PathBuf>,
    /// Kinetics video ids that belong to the upstream test split.
    pub upstream_test: Option<HashSet<String>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manual_sample: None,
            seed: 0,
            train_fraction: 0.8,
            candidate_threshold: CANDIDATE_THRESHOLD,
            policy: AgreementPolicy::default(),
            retry: RetryPolicy::default(),
            stop_after: Stage::Resolution,
            checkpoint_dir: None,
            upstream_test: None,
        }
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
    /// Directory holding the checkpoints to resume from.
    pub checkpoint: Option<PathBuf>,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} ({}) failed: {}", self.stage.number(), self.stage.name(), self.message)?;
        if let Some(dir) = &self.checkpoint {
            write!(f, "; resume from {}", dir.display())?;
        }
        Ok(())
    }
}

impl std::error::Error for PipelineError {}

/// Clip counts after each stage, in the order they were applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub source: Source,
    pub stages: Vec<(String, usize)>,
}

impl PipelineReport {
    fn new(source: Source) -> Self {
        Self {
            source,
            stages: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, count: usize) {
        self.stages.push((name.to_string(), count));
    }

    /// Each stage's count over the previous stage's count.
    pub fn acceptance_ratios(&self) -> Vec<(String, f64)> {
        self.stages
            .windows(2)
            .map(|w| {
                let ratio = if w[0].1 == 0 { 0.0 } else { w[1].1 as f64 / w[0].1 as f64 };
                (w[1].0.clone(), ratio)
            })
            .collect()
    }

    pub fn is_non_increasing(&self) -> bool {
        self.stages.windows(2).all(|w| w[1].1 <= w[0].1)
    }

    pub fn count(&self, stage: &str) -> Option<usize> {
        self.stages.iter().find(|(s, _)| s == stage).map(|(_, c)| *c)
    }

    /// Two-column `stage | # of clips` table.
    pub fn to_table(&self) -> String {
        let title = match self.source {
            Source::Ego4D => "Ego4D Processing Stage",
            Source::Kinetics => "Kinetics Processing Stage",
        };
        let rows: Vec<(String, String)> = self.stages.iter().map(|(s, c)| (s.clone(), thousands(*c))).collect();
        let w0 = rows.iter().map(|r| r.0.len()).chain([title.len()]).max().unwrap_or(0);
        let w1 = rows.iter().map(|r| r.1.len()).chain(["# of clips".len()]).max().unwrap_or(0);
        let mut out = format!("{title:<w0$} | {:>w1$}\n", "# of clips");
        out.push_str(&format!("{}-+-{}\n", "-".repeat(w0), "-".repeat(w1)));
        for (s, c) in rows {
            out.push_str(&format!("{s:<w0$} | {c:>w1$}\n"));
        }
        out
    }
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub const STAGE_ALL: &str = "All";
pub const STAGE_LLM: &str = "Chosen by LLM";
pub const STAGE_OVERLAP: &str = "Remove overlapping clips";
pub const STAGE_PERIODIC: &str = "Chosen by periodicity filter";
pub const STAGE_SENT: &str = "Sent for Manual Labeling";
pub const STAGE_VALID: &str = "Valid Repetition Present";
pub const STAGE_CONSISTENT: &str = "Consistent Count and Segment";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FilterEntry {
    decision: FilterDecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ValidityEntry {
    votes: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationEntry {
    annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResolutionEntry {
    /// Tie-breaking annotation, present only when the first two disagreed.
    third: Option<Annotation>,
}

/// Runs `work` in parallel for every item whose key is not yet logged, then
/// appends the successes. The first failure (in item order) aborts the stage
/// after the successes are persisted.
fn run_stage<I, T, F>(log: &mut StageLog<T>, items: &[(String, I)], work: F) -> Result<(), String>
where
    I: Sync,
    T: Serialize + serde::de::DeserializeOwned + Send,
    F: Fn(&I) -> Result<T, String> + Sync,
{
    let pending: Vec<&(String, I)> = items.iter().filter(|(k, _)| !log.contains(k)).collect();
    let results: Vec<(String, Result<T, String>)> =
        pending.par_iter().map(|(k, item)| (k.clone(), work(item))).collect();
    let mut done = Vec::with_capacity(results.len());
    let mut first_err = None;
    for (k, r) in results {
        match r {
            Ok(v) => done.push((k, v)),
            Err(e) => {
                first_err.get_or_insert(format!("{k}: {e}"));
            }
        }
    }
    log.append(done).map_err(|e| format!("writing checkpoint: {e}"))?;
    first_err.map_or(Ok(()), Err)
}

fn dedup_by_key<T>(items: Vec<(String, T)>) -> Vec<(String, T)> {
    let mut seen = HashSet::new();
    items.into_iter().filter(|(k, _)| seen.insert(k.clone())).collect()
}

fn panel_err(e: PanelError) -> String {
    e.to_string()
}

fn check_annotation(a: &Annotation) -> Result<(), String> {
    let mut v = Vec::new();
    crate::annotation::validate_annotation(a, "", &mut v);
    match v.iter().find(|v| v.severity == crate::annotation::Severity::Error) {
        Some(bad) => Err(format!("rater {} broke `{}` on {}", a.rater_id, bad.rule, bad.field)),
        None => Ok(()),
    }
}

fn mean_score(features: &FeatureRef) -> Result<Option<f64>, String> {
    let loaded;
    let seq = match features {
        FeatureRef::Inline(s) => s,
        FeatureRef::Path(p) => {
            let f = fs::File::open(p).map_err(|e| format!("{}: {e}", p.display()))?;
            loaded = FeatureSequence::read(std::io::BufReader::new(f)).map_err(|e| format!("{}: {e}", p.display()))?;
            &loaded
        }
    };
    match periodicity::frame_periodicity(seq, None) {
        Ok(est) => Ok(Some(est.iter().map(|e| e.score).sum::<f64>() / est.len() as f64)),
        // constant features carry no repetition
        Err(periodicity::PeriodicityError::Degenerate) => Ok(None),
        Err(e) => Err(e.to_string()),
    }
}

/// Runs the curation stages up to `config.stop_after`.
///
/// Returns every clip that was sent for manual labeling (or, when stopping
/// after stage 1, every surviving candidate), sorted by clip key. With a
/// checkpoint directory each stage appends its per-clip results there, and a
/// re-run replays them instead of asking the model or the raters again.
pub fn run_pipeline(
    source: Source,
    input: &PipelineInput,
    llm: &dyn LlmClient,
    panel: &dyn RaterPanel,
    config: &PipelineConfig,
) -> Result<(Vec<ClipRecord>, PipelineReport), PipelineError> {
    let dir = config.checkpoint_dir.as_deref();
    let fail = |stage: Stage| {
        move |message: String| PipelineError {
            stage,
            message,
            checkpoint: config.checkpoint_dir.clone(),
        }
    };
    fn open<T: Serialize + serde::de::DeserializeOwned>(
        dir: Option<&Path>,
        stage: Stage,
        name: &str,
        config: &PipelineConfig,
    ) -> Result<StageLog<T>, PipelineError> {
        StageLog::open(dir, name).map_err(|e| PipelineError {
            stage,
            message: e.to_string(),
            checkpoint: config.checkpoint_dir.clone(),
        })
    }

    let mut report = PipelineReport::new(source);
    report.push(STAGE_ALL, input.len());

    let mut s1 = open(dir, Stage::Filter, "stage1_filter", config)?;
    let mut clips: Vec<ClipRecord> = match (source, input) {
        (Source::Ego4D, PipelineInput::Narrations(list)) => {
            let items = dedup_by_key(
                list.iter()
                    .map(|n| (crate::ClipKey::new(source, &n.video_id, Some(n.narration_timestamp)).to_string(), n))
                    .collect(),
            );
            run_stage(&mut s1, &items, |n| {
                Ok(FilterEntry {
                    decision: narration_filter(n, llm, &config.retry),
                    score: None,
                })
            })
            .map_err(fail(Stage::Filter))?;
            let chosen: Vec<NarrationCandidate> = items
                .iter()
                .filter(|(k, _)| s1.get(k).is_some_and(|e: &FilterEntry| e.decision.is_repetitive()))
                .map(|(_, n)| (*n).clone())
                .collect();
            report.push(STAGE_LLM, chosen.len());
            let kept = remove_overlaps(&chosen);
            report.push(STAGE_OVERLAP, kept.len());
            kept.iter()
                .map(|n| ClipRecord::candidate(source, n.video_id.clone(), Some(n.narration_timestamp)))
                .collect()
        }
        (Source::Kinetics, PipelineInput::Features(list)) => {
            let items = dedup_by_key(
                list.iter()
                    .map(|c| (crate::ClipKey::new(source, &c.video_id, None).to_string(), c))
                    .collect(),
            );
            run_stage(&mut s1, &items, |c| {
                let score = mean_score(&c.features)?;
                let keep = score.is_some_and(|s| periodicity::passes_threshold(s, config.candidate_threshold));
                Ok(FilterEntry {
                    decision: if keep {
                        FilterDecision::Repetitive
                    } else {
                        FilterDecision::NotRepetitive
                    },
                    score,
                })
            })
            .map_err(fail(Stage::Filter))?;
            let kept: Vec<ClipRecord> = items
                .iter()
                .filter(|(k, _)| s1.get(k).is_some_and(|e: &FilterEntry| e.decision.is_repetitive()))
                .map(|(_, c)| ClipRecord::candidate(source, c.video_id.clone(), None))
                .collect();
            report.push(STAGE_PERIODIC, kept.len());
            kept
        }
        (src, _) => {
            let want = match src {
                Source::Ego4D => "narration",
                Source::Kinetics => "feature",
            };
            return Err(fail(Stage::Filter)(format!("{src} clips need {want} input")));
        }
    };
    clips.sort_by_key(|r| r.key());
    if config.stop_after == Stage::Filter {
        return Ok((clips, report));
    }

    if let Some(n) = config.manual_sample.filter(|&n| n < clips.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        clips.shuffle(&mut rng);
        clips.truncate(n);
        clips.sort_by_key(|r| r.key());
    }
    report.push(STAGE_SENT, clips.len());
    for r in &mut clips {
        r.state = ClipState::ValidityPending;
    }

    // Stage 2: both raters must see a repetition.
    let mut s2 = open(dir, Stage::Validity, "stage2_validity", config)?;
    let items: Vec<(String, &ClipRecord)> = clips.iter().map(|r| (r.key().to_string(), r)).collect();
    run_stage(&mut s2, &items, |r| {
        let votes = (0..2).map(|k| panel.has_repetition(r, k)).collect::<Result<Vec<_>, _>>();
        Ok(ValidityEntry {
            votes: votes.map_err(panel_err)?,
        })
    })
    .map_err(fail(Stage::Validity))?;
    for r in &mut clips {
        let entry: &ValidityEntry = s2.get(r.key().as_str()).expect("stage 2 logged every clip");
        r.state = if entry.votes.iter().all(|&v| v) {
            ClipState::Valid
        } else {
            ClipState::Invalid
        };
    }
    report.push(STAGE_VALID, clips.iter().filter(|r| r.state == ClipState::Valid).count());
    if config.stop_after == Stage::Validity {
        return Ok((clips, report));
    }

    // Stage 3: two independent annotations per valid clip.
    let mut s3 = open(dir, Stage::Annotation, "stage3_annotation", config)?;
    let items: Vec<(String, &ClipRecord)> = clips
        .iter()
        .filter(|r| r.state == ClipState::Valid)
        .map(|r| (r.key().to_string(), r))
        .collect();
    run_stage(&mut s3, &items, |r| {
        let annotations = (0..2).map(|k| panel.annotate(r, k)).collect::<Result<Vec<_>, _>>().map_err(panel_err)?;
        annotations.iter().try_for_each(check_annotation)?;
        Ok(AnnotationEntry { annotations })
    })
    .map_err(fail(Stage::Annotation))?;
    for r in clips.iter_mut().filter(|r| r.state == ClipState::Valid) {
        let entry: &AnnotationEntry = s3.get(r.key().as_str()).expect("stage 3 logged every valid clip");
        r.annotations = entry.annotations.clone();
        r.state = ClipState::Annotated;
    }
    if config.stop_after == Stage::Annotation {
        return Ok((clips, report));
    }

    // Stage 4: resolve, escalating disagreements to a third rater.
    let mut s4 = open(dir, Stage::Resolution, "stage4_resolution", config)?;
    let items: Vec<(String, &ClipRecord)> = clips
        .iter()
        .filter(|r| r.state == ClipState::Annotated)
        .map(|r| (r.key().to_string(), r))
        .collect();
    run_stage(&mut s4, &items, |r| {
        let first = resolve(&r.annotations, &config.policy).map_err(|e| e.to_string())?;
        let third = if first.verdict == Verdict::NeedsThirdRater {
            let a = panel.annotate(r, 2).map_err(panel_err)?;
            check_annotation(&a)?;
            Some(a)
        } else {
            None
        };
        Ok(ResolutionEntry { third })
    })
    .map_err(fail(Stage::Resolution))?;
    for r in clips.iter_mut().filter(|r| r.state == ClipState::Annotated) {
        let entry: &ResolutionEntry = s4.get(r.key().as_str()).expect("stage 4 logged every annotated clip");
        if let Some(a) = &entry.third {
            r.annotations.push(a.clone());
        }
        let outcome = resolve(&r.annotations, &config.policy).map_err(|e| fail(Stage::Resolution)(e.to_string()))?;
        finalize(r, &outcome);
    }
    report.push(STAGE_CONSISTENT, clips.iter().filter(|r| r.consistent).count());
    assign_splits(&mut clips, config.train_fraction, config.seed, config.upstream_test.as_ref())
        .map_err(|e| fail(Stage::Resolution)(e.to_string()))?;

    if let Some(d) = dir {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(d.join("report.json"), json + "\n").map_err(|e| fail(Stage::Resolution)(e.to_string()))?;
    }
    Ok((clips, report))
}

/// Reads narrations from a JSON array or JSON-lines file.
/// The resolved clips of a pipeline run, which are the ones a release holds.
pub fn released(records: &[ClipRecord]) -> Vec<ClipRecord> {
    records
        .iter()
        .filter(|r| r.state == ClipState::Resolved)
        .cloned()
        .collect()
}

pub fn load_narrations(path: &Path) -> Result<Vec<NarrationCandidate>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).map_err(|e| format!("{}: {e}", path.display()));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1)))
        .collect()
}

/// Every `*.feat` or `*.txt` file in `dir`, keyed by file stem, sorted.
pub fn load_feature_dir(dir: &Path) -> Result<Vec<ExoClip>, String> {
    let mut clips = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    for entry in entries {
        let path = entry.map_err(|e| e.to_string())?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if !matches!(ext, Some("feat") | Some("txt")) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        clips.push(ExoClip {
            video_id: stem.to_string(),
            features: FeatureRef::Path(path.clone()),
        });
    }
    clips.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(clips)
}
