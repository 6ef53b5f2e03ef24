use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use repforge_core::annotation::parse_release;
use repforge_core::consistency::resolve;
use repforge_core::{AgreementPolicy, Annotation, ClipKey, ClipRecord, EvalPair, Source, Split, TimeSegment, Verdict};
use serde::Deserialize;
use serde_json::Value;

/// Guesses the source of a release document: Ego4D rows carry a narration
/// timestamp, Kinetics rows do not.
pub fn detect_source(bytes: &[u8]) -> Result<Source> {
    let doc: Value = serde_json::from_slice(bytes).context("release is not valid JSON")?;
    let first = match &doc {
        Value::Array(items) => items.first(),
        Value::Object(map) => map.values().next(),
        _ => None,
    };
    Ok(match first.and_then(Value::as_object) {
        Some(obj) if obj.contains_key("narration_timestamp_secs") => Source::Ego4D,
        _ => Source::Kinetics,
    })
}

pub fn read_release(path: &Path, source: Option<Source>) -> Result<(Source, Vec<ClipRecord>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let source = match source {
        Some(s) => s,
        None => detect_source(&bytes)?,
    };
    let records = parse_release(&bytes, source).with_context(|| format!("parsing {}", path.display()))?;
    Ok((source, records))
}

/// Writes to `path`, or stdout when it is absent or `-`.
pub fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) if p != Path::new("-") => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        _ => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

/// The annotation used as ground truth for a clip, if it has one.
pub fn ground_truth(record: &ClipRecord, policy: &AgreementPolicy) -> Option<Annotation> {
    match record.annotations.len() {
        0 => None,
        1 => Some(record.annotations[0].clone()),
        2 | 3 => resolve(&record.annotations, policy)
            .ok()
            .filter(|o| o.verdict == Verdict::Consistent)
            .and_then(|o| o.canonical),
        // more raters than the protocol allows; fall back to the first
        _ => Some(record.annotations[0].clone()),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionRow {
    video_id: String,
    #[serde(default)]
    narration_timestamp_secs: Option<f64>,
    count: u32,
    #[serde(default)]
    start_time: Option<f64>,
    #[serde(default)]
    end_time: Option<f64>,
    #[serde(default)]
    mismatched: bool,
}

fn read_rows(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

/// Joins predictions with the ground truth of the selected split.
///
/// Every truth clip needs exactly one prediction. Rows flagged `mismatched`
/// are scored against a count of zero and need no truth clip.
pub fn eval_pairs(
    pred: &Path,
    source: Source,
    truth: &[ClipRecord],
    split: Option<Split>,
    policy: &AgreementPolicy,
) -> Result<Vec<EvalPair>> {
    let mut preds: HashMap<ClipKey, PredictionRow> = HashMap::new();
    let mut pairs = Vec::new();
    for row in read_rows(pred)? {
        if row.mismatched {
            pairs.push(EvalPair::mismatched(row.count));
            continue;
        }
        let ts = match source {
            Source::Ego4D => row.narration_timestamp_secs,
            Source::Kinetics => None,
        };
        let key = ClipKey::new(source, &row.video_id, ts);
        if preds.insert(key.clone(), row).is_some() {
            bail!("duplicate prediction for {key}");
        }
    }
    let mut used = 0;
    for record in truth.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
        let Some(gt) = ground_truth(record, policy) else {
            continue;
        };
        let key = record.key();
        let row = preds.get(&key).with_context(|| format!("no prediction for {key}"))?;
        used += 1;
        let seg = match (row.start_time, row.end_time) {
            (Some(s), Some(e)) => Some(TimeSegment::try_new(s, e).with_context(|| format!("prediction for {key}"))?),
            (None, None) => None,
            _ => bail!("prediction for {key} has only one segment bound"),
        };
        pairs.push(EvalPair::new(row.count, gt.count, seg, gt.segment));
    }
    if used < preds.len() {
        bail!("{} predictions have no matching truth clip", preds.len() - used);
    }
    Ok(pairs)
}
