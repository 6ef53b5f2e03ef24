//! Pool of annotation tasks backed by append-only JSONL logs.
//!
//! Clips, validity answers and full annotations each go to their own file.
//! Replaying the three files in that order rebuilds the pool; leases are
//! held in memory only and lapse on restart.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use repforge_core::annotation::{annotation_violations, serialize_release, Severity, Violation};
use repforge_core::consistency::{assign_splits, finalize, resolve};
use repforge_core::{AgreementPolicy, Annotation, ClipRecord, ClipState, Source, TimeSegment, Verdict};

use crate::error::ServiceError;

pub const CLIPS_LOG: &str = "stage1_clips.jsonl";
pub const VALIDITY_LOG: &str = "stage2_validity.jsonl";
pub const ANNOTATION_LOG: &str = "stage3_annotation.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Validity,
    FullAnnotation,
}

impl TaskKind {
    fn tag(self) -> &'static str {
        match self {
            TaskKind::Validity => "validity",
            TaskKind::FullAnnotation => "annotation",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "validity" => Ok(TaskKind::Validity),
            "full_annotation" | "annotation" => Ok(TaskKind::FullAnnotation),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

/// A clip as it enters the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSeed {
    pub source: Source,
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narration_timestamp: Option<f64>,
    /// Local file path or http(s) URL of the clip video.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<String>,
}

impl ClipSeed {
    pub fn clip_id(&self) -> String {
        ClipRecord::candidate(self.source, self.video_id.clone(), self.narration_timestamp)
            .key()
            .as_str()
            .to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lease {
    pub rater_id: String,
    /// Unix seconds.
    pub expires_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub clip_id: String,
    pub kind: TaskKind,
    pub media_url: String,
    pub lease: Option<Lease>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPayload {
    pub start: f64,
    pub end: f64,
    pub count: u32,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Validity(bool),
    Annotation(AnnotationPayload),
}

impl Payload {
    fn kind(&self) -> TaskKind {
        match self {
            Payload::Validity(_) => TaskKind::Validity,
            Payload::Annotation(_) => TaskKind::FullAnnotation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub task_id: String,
    pub rater_id: String,
    pub payload: Payload,
    /// Unix seconds; stamped by the service when absent.
    #[serde(default)]
    pub submitted_at: Option<f64>,
}

/// What happened to the clip as a result of a submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    Recorded,
    ValidityPassed,
    Invalid,
    ThirdRaterRequested,
    Resolved { consistent: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub task_id: String,
    pub clip_id: String,
    pub effect: Effect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Phase {
    Validity,
    Annotation { slots: usize },
    Invalid,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClipEntry {
    seed: ClipSeed,
    record: ClipRecord,
    phase: Phase,
    /// Validity answers by slot.
    validity: [Option<(String, bool)>; 2],
    /// Slot of each annotation in `record.annotations`, in submission order.
    annotation_slots: Vec<usize>,
}

impl ClipEntry {
    fn new(seed: ClipSeed) -> Self {
        let record = ClipRecord::candidate(seed.source, seed.video_id.clone(), seed.narration_timestamp);
        Self {
            seed,
            record,
            phase: Phase::Validity,
            validity: [None, None],
            annotation_slots: Vec::new(),
        }
    }

    fn open_slots(&self, kind: TaskKind) -> Vec<usize> {
        match (kind, &self.phase) {
            (TaskKind::Validity, Phase::Validity) => (0..2).filter(|&s| self.validity[s].is_none()).collect(),
            (TaskKind::FullAnnotation, Phase::Annotation { slots }) => {
                (0..*slots).filter(|s| !self.annotation_slots.contains(s)).collect()
            }
            _ => Vec::new(),
        }
    }

    fn has_submitted(&self, kind: TaskKind, rater: &str) -> bool {
        match kind {
            TaskKind::Validity => self.validity.iter().flatten().any(|(r, _)| r == rater),
            TaskKind::FullAnnotation => self.record.annotations.iter().any(|a| a.rater_id == rater),
        }
    }
}

fn task_id(clip_id: &str, kind: TaskKind, slot: usize) -> String {
    format!("{clip_id}#{}-{slot}", kind.tag())
}

fn parse_task_id(task_id: &str) -> Option<(&str, TaskKind, usize)> {
    let (clip, rest) = task_id.rsplit_once('#')?;
    let (tag, slot) = rest.split_once('-')?;
    let kind = match tag {
        "validity" => TaskKind::Validity,
        "annotation" => TaskKind::FullAnnotation,
        _ => return None,
    };
    Some((clip, kind, slot.parse().ok()?))
}

#[derive(Serialize, Deserialize)]
struct SubmissionLine {
    clip_id: String,
    slot: usize,
    #[serde(flatten)]
    submission: Submission,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreConfig {
    pub lease_ttl_secs: f64,
    pub policy: AgreementPolicy,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            lease_ttl_secs: 30.0 * 60.0,
            policy: AgreementPolicy::default(),
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

/// Snapshot of everything that replay must reproduce.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoreSnapshot {
    clips: Vec<ClipEntry>,
}

pub struct Store {
    dir: Option<PathBuf>,
    config: StoreConfig,
    clips: Vec<ClipEntry>,
    index: HashMap<String, usize>,
    leases: HashMap<String, Lease>,
}

fn append_line<T: Serialize>(dir: Option<&Path>, file: &str, value: &T) -> io::Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join(file))?;
    f.write_all(&line)?;
    f.sync_data()
}

/// Reads a JSONL file of clip seeds.
pub fn load_seeds(path: &Path) -> Result<Vec<ClipSeed>, ServiceError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    Ok(read_lines(dir, name)?)
}

fn read_lines<T: for<'de> Deserialize<'de>>(dir: &Path, file: &str) -> io::Result<Vec<T>> {
    let path = dir.join(file);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        out.push(value);
    }
    Ok(out)
}

impl Store {
    /// In-memory store with no persistence.
    pub fn in_memory(config: StoreConfig) -> Self {
        Self {
            dir: None,
            config,
            clips: Vec::new(),
            index: HashMap::new(),
            leases: HashMap::new(),
        }
    }

    /// Opens the store in `dir`, replaying any existing logs.
    pub fn open(dir: &Path, config: StoreConfig) -> Result<Self, ServiceError> {
        fs::create_dir_all(dir)?;
        let mut store = Self::in_memory(config);
        for seed in read_lines::<ClipSeed>(dir, CLIPS_LOG)? {
            store.insert_clip(seed);
        }
        for file in [VALIDITY_LOG, ANNOTATION_LOG] {
            for line in read_lines::<SubmissionLine>(dir, file)? {
                store.apply(&line.clip_id, line.slot, &line.submission)?;
            }
        }
        store.dir = Some(dir.to_path_buf());
        Ok(store)
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot { clips: self.clips.clone() }
    }

    fn insert_clip(&mut self, seed: ClipSeed) -> bool {
        let id = seed.clip_id();
        if self.index.contains_key(&id) {
            return false;
        }
        self.index.insert(id, self.clips.len());
        self.clips.push(ClipEntry::new(seed));
        true
    }

    /// Adds clips to the pool; clips already present are skipped. Returns
    /// how many were new.
    pub fn register(&mut self, seeds: Vec<ClipSeed>) -> Result<usize, ServiceError> {
        let mut added = 0;
        for seed in seeds {
            if self.insert_clip(seed.clone()) {
                append_line(self.dir.as_deref(), CLIPS_LOG, &seed)?;
                added += 1;
            }
        }
        Ok(added)
    }

    pub fn clip_media(&self, clip_id: &str) -> Result<Option<&str>, ServiceError> {
        let i = self.clip_index(clip_id)?;
        Ok(self.clips[i].seed.media.as_deref())
    }

    pub fn clip_record(&self, clip_id: &str) -> Result<&ClipRecord, ServiceError> {
        let i = self.clip_index(clip_id)?;
        Ok(&self.clips[i].record)
    }

    fn clip_index(&self, clip_id: &str) -> Result<usize, ServiceError> {
        self.index
            .get(clip_id)
            .copied()
            .ok_or_else(|| ServiceError::UnknownClip(clip_id.to_string()))
    }

    fn lease_active(&self, task_id: &str, now: f64) -> Option<&Lease> {
        self.leases.get(task_id).filter(|l| l.expires_at > now)
    }

    fn to_task(&self, clip: &ClipEntry, kind: TaskKind, slot: usize) -> Task {
        let clip_id = clip.record.key().as_str().to_string();
        let id = task_id(&clip_id, kind, slot);
        Task {
            lease: self.leases.get(&id).cloned(),
            media_url: format!("/clips/{}/media", clip_id),
            task_id: id,
            clip_id,
            kind,
        }
    }

    /// Leases the oldest free task of `kind` that `rater` has not worked on.
    /// A rater that already holds a live lease of that kind gets it back.
    pub fn next_task(&mut self, rater: &str, kind: TaskKind, now: f64) -> Option<Task> {
        self.leases.retain(|_, l| l.expires_at > now);
        let mut pick = None;
        'clips: for (ci, clip) in self.clips.iter().enumerate() {
            let open = clip.open_slots(kind);
            if open.is_empty() || clip.has_submitted(kind, rater) {
                continue;
            }
            let clip_id = clip.record.key();
            for &slot in &open {
                if let Some(l) = self.leases.get(&task_id(clip_id.as_str(), kind, slot)) {
                    if l.rater_id == rater {
                        return Some(self.to_task(clip, kind, slot));
                    }
                }
            }
            if pick.is_some() {
                continue;
            }
            for &slot in &open {
                if !self.leases.contains_key(&task_id(clip_id.as_str(), kind, slot)) {
                    pick = Some((ci, slot));
                    continue 'clips;
                }
            }
        }
        let (ci, slot) = pick?;
        let id = task_id(self.clips[ci].record.key().as_str(), kind, slot);
        self.leases.insert(
            id,
            Lease {
                rater_id: rater.to_string(),
                expires_at: now + self.config.lease_ttl_secs,
            },
        );
        Some(self.to_task(&self.clips[ci], kind, slot))
    }

    /// Checks the lease, validates and persists the submission, then
    /// advances the clip.
    pub fn submit(&mut self, mut submission: Submission, now: f64) -> Result<Ack, ServiceError> {
        let (clip_id, kind, slot) =
            parse_task_id(&submission.task_id).ok_or_else(|| ServiceError::UnknownTask(submission.task_id.clone()))?;
        let ci = self
            .index
            .get(clip_id)
            .copied()
            .ok_or_else(|| ServiceError::UnknownTask(submission.task_id.clone()))?;
        let clip = &self.clips[ci];
        if submission.payload.kind() != kind {
            return Err(ServiceError::KindMismatch { expected: kind });
        }
        let filled = match kind {
            TaskKind::Validity => slot < 2 && clip.validity[slot].is_some(),
            TaskKind::FullAnnotation => clip.annotation_slots.contains(&slot),
        };
        if filled || clip.has_submitted(kind, &submission.rater_id) {
            return Err(ServiceError::DuplicateSubmission(submission.task_id.clone()));
        }
        if !clip.open_slots(kind).contains(&slot) {
            return Err(ServiceError::UnknownTask(submission.task_id.clone()));
        }
        match self.lease_active(&submission.task_id, now) {
            Some(l) if l.rater_id == submission.rater_id => {}
            _ => return Err(ServiceError::StaleLease(submission.task_id.clone())),
        }
        if let Payload::Annotation(a) = &submission.payload {
            let violations = payload_violations(a);
            if !violations.is_empty() {
                return Err(ServiceError::Validation(violations));
            }
        }
        submission.submitted_at.get_or_insert(now);
        let clip_id = clip_id.to_string();
        let line = SubmissionLine {
            clip_id: clip_id.clone(),
            slot,
            submission,
        };
        let file = match kind {
            TaskKind::Validity => VALIDITY_LOG,
            TaskKind::FullAnnotation => ANNOTATION_LOG,
        };
        append_line(self.dir.as_deref(), file, &line)?;
        self.leases.remove(&line.submission.task_id);
        let effect = self.apply(&clip_id, slot, &line.submission)?;
        Ok(Ack {
            task_id: line.submission.task_id,
            clip_id,
            effect,
        })
    }

    /// State transition shared by live submissions and replay.
    fn apply(&mut self, clip_id: &str, slot: usize, s: &Submission) -> Result<Effect, ServiceError> {
        let ci = self.clip_index(clip_id)?;
        let policy = self.config.policy;
        let clip = &mut self.clips[ci];
        match &s.payload {
            Payload::Validity(answer) => {
                clip.validity[slot] = Some((s.rater_id.clone(), *answer));
                clip.record.state = ClipState::ValidityPending;
                let [Some((_, a)), Some((_, b))] = &clip.validity else {
                    return Ok(Effect::Recorded);
                };
                if *a && *b {
                    clip.phase = Phase::Annotation { slots: 2 };
                    clip.record.state = ClipState::Valid;
                    Ok(Effect::ValidityPassed)
                } else {
                    clip.phase = Phase::Invalid;
                    clip.record.state = ClipState::Invalid;
                    Ok(Effect::Invalid)
                }
            }
            Payload::Annotation(p) => {
                let seg = TimeSegment::try_new(p.start, p.end)
                    .map_err(|e| ServiceError::Validation(vec![Violation {
                        field: "start".into(),
                        rule: e.to_string(),
                        severity: Severity::Error,
                    }]))?;
                clip.record
                    .annotations
                    .push(Annotation::new(p.description.clone(), seg, p.count, s.rater_id.clone()));
                clip.annotation_slots.push(slot);
                clip.record.state = ClipState::Annotated;
                let n = clip.record.annotations.len();
                let Phase::Annotation { slots } = clip.phase else {
                    return Ok(Effect::Recorded);
                };
                if n < slots {
                    return Ok(Effect::Recorded);
                }
                let outcome = resolve(&clip.record.annotations, &policy).map_err(|e| ServiceError::Internal(e.to_string()))?;
                match outcome.verdict {
                    Verdict::NeedsThirdRater => {
                        clip.phase = Phase::Annotation { slots: 3 };
                        Ok(Effect::ThirdRaterRequested)
                    }
                    Verdict::Consistent | Verdict::Inconsistent => {
                        finalize(&mut clip.record, &outcome);
                        clip.phase = Phase::Resolved;
                        Ok(Effect::Resolved {
                            consistent: clip.record.consistent,
                        })
                    }
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Clips still waiting on raters.
    pub fn pending(&self) -> usize {
        self.clips
            .iter()
            .filter(|c| !matches!(c.phase, Phase::Invalid | Phase::Resolved))
            .count()
    }

    /// Resolved clips with splits assigned, in registration order.
    pub fn resolved_records(&self) -> Result<Vec<ClipRecord>, ServiceError> {
        let mut records: Vec<ClipRecord> = self
            .clips
            .iter()
            .filter(|c| c.phase == Phase::Resolved)
            .map(|c| c.record.clone())
            .collect();
        assign_splits(&mut records, self.config.train_fraction, self.config.split_seed, None)
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok(records)
    }

    /// The release document. Every clip must be resolved or invalid first.
    pub fn export_release(&self) -> Result<Vec<u8>, ServiceError> {
        if self.clips.is_empty() {
            return Err(ServiceError::EmptyStore);
        }
        let pending = self.pending();
        if pending > 0 {
            return Err(ServiceError::NotFinalized { pending });
        }
        let records = self.resolved_records()?;
        if records.is_empty() {
            return Err(ServiceError::EmptyStore);
        }
        serialize_release(&records).map_err(|e| ServiceError::Internal(e.to_string()))
    }
}

fn payload_violations(a: &AnnotationPayload) -> Vec<Violation> {
    if !(a.start.is_finite() && a.end.is_finite() && a.start < a.end) {
        return vec![Violation {
            field: "start_time".into(),
            rule: "start < end".into(),
            severity: Severity::Error,
        }];
    }
    let ann = Annotation::new(a.description.clone(), TimeSegment::new(a.start, a.end), a.count, "");
    annotation_violations(&ann)
        .into_iter()
        .filter(|v| v.severity == Severity::Error)
        .collect()
}
