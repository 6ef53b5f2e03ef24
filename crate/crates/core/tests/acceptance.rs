use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use repforge_core::annotation::{
    compute_stats, parse_release, serialize_release, validate, DatasetStats, StatsFilter,
};
use repforge_core::consistency::{assign_splits, finalize, resolve, segment_iou};
use repforge_core::curation::{
    load_narrations, narration_filter, released, run_pipeline, KeywordLlm, PipelineConfig, PipelineInput, RetryPolicy,
    ScriptedPanel,
};
use repforge_core::density::{build_density, combined_loss, count_from_density, scaled_mse, LossTerms};
use repforge_core::metrics::evaluate;
use repforge_core::periodicity::count_and_localize;
use repforge_core::synthgen::{generate, generate_noise};
use repforge_core::{
    AgreementPolicy, Annotation, ClipRecord, ClipState, CounterConfig, DensityVector, EvalPair, LossWeights,
    NarrationCandidate, Normalization, Source, Split, SynthSpec, TimeSegment, Verdict,
};

const METRIC_TOL: f64 = 1e-9;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn within(elapsed: Duration, budget_secs: f64) -> bool {
    elapsed.as_secs_f64() < budget_secs
}

// Brute-force per-row recomputation, sequential sums.
fn oracle_metrics(pairs: &[EvalPair]) -> [f64; 5] {
    let n = pairs.len() as f64;
    let (mut mae, mut sq, mut oboe, mut obze) = (0.0, 0.0, 0.0, 0.0);
    let (mut iou_sum, mut iou_n) = (0.0, 0usize);
    for p in pairs {
        let truth = p.true_count as f64;
        let d = (p.predicted_count as f64 - truth).abs();
        mae += d / truth;
        sq += (d / truth).powi(2);
        if d > 1.0 {
            oboe += 1.0;
        }
        if d != 0.0 {
            obze += 1.0;
        }
        if let Some(t) = p.true_segment {
            iou_n += 1;
            if let Some(s) = p.predicted_segment {
                let lo = s.start.max(t.start);
                let hi = s.end.min(t.end);
                let inter = if hi > lo { hi - lo } else { 0.0 };
                let union = (s.end - s.start) + (t.end - t.start) - inter;
                iou_sum += inter / union;
            }
        }
    }
    let iou = if iou_n == 0 { 0.0 } else { iou_sum / iou_n as f64 };
    [mae / n, oboe / n, obze / n, (sq / n).sqrt(), iou]
}

fn random_segment(rng: &mut ChaCha8Rng) -> TimeSegment {
    let a = rng.random_range(0.0..9.9);
    let b = rng.random_range(a + 0.01..=10.0);
    TimeSegment::new(a, b)
}

fn metric_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=200);
        let pairs: Vec<EvalPair> = (0..n)
            .map(|_| {
                let truth = rng.random_range(2..=121);
                let pred = if rng.random_bool(0.3) { truth } else { rng.random_range(0..=130) };
                let pseg = rng.random_bool(0.9).then(|| random_segment(&mut rng));
                EvalPair::new(pred, truth, pseg, random_segment(&mut rng))
            })
            .collect();
        let r = evaluate(&pairs, Normalization::ByTruth).unwrap();
        let o = oracle_metrics(&pairs);
        for (got, want) in [r.mae, r.oboe, r.obze, r.rmse, r.iou].iter().zip(o) {
            worst = worst.max((got - want).abs());
        }
    }
    let el = t0.elapsed();
    let msg = format!("1000 sets, max |diff| {worst:.2e} (tol {METRIC_TOL:.0e}), {:.2} s (< 5 s)", el.as_secs_f64());
    if worst <= METRIC_TOL && within(el, 5.0) {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

fn density_round_trip() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut bad = 0;
    for _ in 0..10_000 {
        let fps = if rng.random_bool(0.5) { 25.0 } else { 30.0 };
        let frames = (10.0 * fps) as usize;
        let count = rng.random_range(2..=121);
        let seg = random_segment(&mut rng);
        let d = build_density(seg, count, frames, fps).unwrap();
        if count_from_density(&d) != count {
            bad += 1;
        }
    }
    let el = t0.elapsed();
    let msg = format!("10000 triples, {bad} mismatches, {:.2} s (< 10 s)", el.as_secs_f64());
    if bad == 0 && within(el, 10.0) {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

fn loss_formula() -> Outcome {
    let w = LossWeights::default();
    let combined = combined_loss(
        LossTerms {
            class_agnostic: 1.0,
            class_aware: 1.0,
            mismatch: 1.0,
            contrastive: 1.0,
        },
        &w,
    );
    let zero = DensityVector::new(vec![0.0; 10], 30.0).unwrap();
    let mut impulse = vec![0.0; 10];
    impulse[4] = 1.0;
    let impulse = DensityVector::new(impulse, 30.0).unwrap();
    let mse = scaled_mse(&zero, &impulse, w.density_scale).unwrap();
    let msg = format!("combined_loss(1,1,1,1) = {combined}, scaled_mse(zero, impulse) = {mse}");
    if combined == 3.25 && mse == 1000.0 {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

#[derive(Deserialize)]
struct CaseAnnotation {
    start: f64,
    end: f64,
    count: u32,
}

#[derive(Deserialize)]
struct Case {
    clip: String,
    annotations: Vec<CaseAnnotation>,
    verdict: String,
    agreeing: Option<(usize, usize)>,
    canonical: Option<usize>,
    escalated: bool,
}

fn consistency_semantics() -> Outcome {
    let cases: Vec<Case> = serde_json::from_slice(&std::fs::read(fixture("consistency_cases.json")).unwrap()).unwrap();
    let policy = AgreementPolicy::default();
    let mut wrong = Vec::new();
    let mut records = Vec::new();
    for case in &cases {
        let anns: Vec<Annotation> = case
            .annotations
            .iter()
            .enumerate()
            .map(|(k, a)| Annotation::new("task", TimeSegment::new(a.start, a.end), a.count, format!("r{k}")))
            .collect();
        let first = resolve(&anns[..2], &policy).unwrap();
        let escalated = first.verdict == Verdict::NeedsThirdRater;
        let out = if escalated {
            if anns.len() < 3 {
                wrong.push(case.clip.clone());
                continue;
            }
            resolve(&anns[..3], &policy).unwrap()
        } else {
            first
        };
        let verdict = match out.verdict {
            Verdict::Consistent => "consistent",
            Verdict::Inconsistent => "inconsistent",
            Verdict::NeedsThirdRater => "needs_third_rater",
        };
        let canonical = out
            .agreeing_indices
            .zip(out.canonical.as_ref())
            .map(|((i, j), c)| if anns[i].rater_id == c.rater_id { i } else { j });
        if verdict != case.verdict
            || escalated != case.escalated
            || out.agreeing_indices != case.agreeing
            || canonical != case.canonical
        {
            wrong.push(case.clip.clone());
        }
        let mut rec = ClipRecord::candidate(Source::Kinetics, case.clip.clone(), None);
        rec.annotations = anns[..if escalated { 3 } else { 2 }].to_vec();
        rec.state = ClipState::Annotated;
        finalize(&mut rec, &out);
        records.push(rec);
    }
    assign_splits(&mut records, 0.8, 3, None).unwrap();
    let tests = records.iter().filter(|r| r.split == Split::Test).count();
    let leaked = records.iter().filter(|r| r.split == Split::Test && !r.consistent).count();
    let msg = format!(
        "{} clips, {} mismatches with truth table {:?}, {tests} Test clips, {leaked} inconsistent in Test",
        cases.len(),
        wrong.len(),
        wrong
    );
    if cases.len() == 50 && wrong.is_empty() && leaked == 0 && tests > 0 {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

fn periodicity_counter() -> Outcome {
    const T: usize = 320;
    let t0 = Instant::now();
    let config = CounterConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2026);
    let (mut off_by_one, mut ious) = (0usize, Vec::new());
    for seed in 0..200u64 {
        let count: u32 = rng.random_range(2..=20);
        let max_period = (T as f64 * 0.9 / (count as f64 * 1.05)).min(120.0);
        let min_period = 8.0f64.max(max_period * 0.3);
        let period = rng.random_range(min_period..=max_period);
        let span = count as f64 * period * 1.05;
        let onset = rng.random_range(0..=((T as f64 - span).floor() as usize));
        let spec = SynthSpec {
            count,
            period,
            jitter: rng.random_range(0.0..=0.05),
            onset,
            noise_snr_db: rng.random_range(10.0..=30.0),
            dim: 16,
            total_frames: T,
            fps: 30.0,
            seed,
        };
        let (seq, truth) = generate(&spec).unwrap();
        let r = count_and_localize(&seq, &config).unwrap();
        if r.count.abs_diff(count) > 1 {
            off_by_one += 1;
        }
        ious.push(r.segment.map_or(0.0, |s| segment_iou(&s, &truth.segment)));
    }
    let mean_iou = ious.iter().sum::<f64>() / ious.len() as f64;
    let mut zero = 0usize;
    for seed in 0..200u64 {
        let seq = generate_noise(T, 16, 30.0, 10_000 + seed).unwrap();
        if count_and_localize(&seq, &config).unwrap().count == 0 {
            zero += 1;
        }
    }
    let el = t0.elapsed();
    let oboe = off_by_one as f64 / 200.0;
    let zero_rate = zero as f64 / 200.0;
    let msg = format!(
        "200 synthetic: OBOE {oboe:.3} (= 0), mean IOU {mean_iou:.3} (>= 0.7); 200 noise: {:.1}% zero (>= 95%); {:.1} s (< 60 s)",
        100.0 * zero_rate,
        el.as_secs_f64()
    );
    if off_by_one == 0 && mean_iou >= 0.7 && zero_rate >= 0.95 && within(el, 60.0) {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

fn run_fixture_pipeline() -> (Vec<u8>, Vec<(String, usize)>) {
    let narrations = load_narrations(&fixture("narrations.jsonl")).unwrap();
    let panel = ScriptedPanel::load(&fixture("raters.json")).unwrap();
    let config = PipelineConfig {
        seed: 7,
        retry: RetryPolicy::immediate(1),
        ..PipelineConfig::default()
    };
    let (records, report) = run_pipeline(
        Source::Ego4D,
        &PipelineInput::Narrations(narrations),
        &KeywordLlm,
        &panel,
        &config,
    )
    .unwrap();
    (serialize_release(&released(&records)).unwrap(), report.stages)
}

fn pipeline_determinism() -> Outcome {
    let (a, stages) = run_fixture_pipeline();
    let (b, _) = run_fixture_pipeline();
    let parsed = parse_release(&a, Source::Ego4D).unwrap();
    let violations: usize = parsed.iter().map(|r| validate(r).len()).sum();
    let counts: Vec<String> = stages.iter().map(|(_, n)| n.to_string()).collect();
    let msg = format!(
        "export {} bytes, identical: {}, {} clips re-parsed, {violations} violations, stages [{}]",
        a.len(),
        a == b,
        parsed.len(),
        counts.join(", ")
    );
    if a == b && !parsed.is_empty() && violations == 0 {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

struct Row {
    label: &'static str,
    filter: StatsFilter,
    videos: usize,
    annos: usize,
    // printed to the table's precision
    duration: [&'static str; 3],
    count: [&'static str; 3],
    text: [&'static str; 3],
    vocab: usize,
}

fn decimals(s: &str) -> usize {
    s.split_once('.').map_or(0, |(_, f)| f.len())
}

fn row_mismatches(stats: &DatasetStats, row: &Row) -> Vec<String> {
    let mut out = Vec::new();
    if stats.num_videos != row.videos {
        out.push(format!("videos {} != {}", stats.num_videos, row.videos));
    }
    if stats.num_annotations != row.annos {
        out.push(format!("annos {} != {}", stats.num_annotations, row.annos));
    }
    if stats.vocab_size != row.vocab {
        out.push(format!("vocab {} != {}", stats.vocab_size, row.vocab));
    }
    for (name, got, want) in [
        ("duration", stats.duration, row.duration),
        ("count", stats.count, row.count),
        ("text", stats.text_length, row.text),
    ] {
        for (v, w) in [got.avg, got.min, got.max].iter().zip(want) {
            let shown = format!("{:.*}", decimals(w), v);
            if shown != w {
                out.push(format!("{name} {shown} != {w}"));
            }
        }
    }
    out
}

fn real_data() -> Outcome {
    let kinetics = std::env::var_os("REPFORGE_KINETICS_RELEASE");
    let ego = std::env::var_os("REPFORGE_EGO4D_RELEASE");
    let (Some(kinetics), Some(ego)) = (kinetics, ego) else {
        return Outcome::Skip("set REPFORGE_KINETICS_RELEASE and REPFORGE_EGO4D_RELEASE to the release files".into());
    };
    let rows_k = [
        Row { label: "Kinetics train", filter: StatsFilter::Train, videos: 18127, annos: 19520, duration: ["3.4", "0.04", "10.0"], count: ["4.5", "2", "62"], text: ["8.0", "2", "19"], vocab: 2468 },
        Row { label: "Kinetics consistent train", filter: StatsFilter::ConsistentTrain, videos: 1111, annos: 2230, duration: ["3.5", "0.2", "10.0"], count: ["4.9", "2", "50"], text: ["6.3", "2", "15"], vocab: 740 },
        Row { label: "Kinetics test", filter: StatsFilter::Test, videos: 3760, annos: 7563, duration: ["3.5", "0.1", "10.0"], count: ["5.0", "2", "46"], text: ["6.1", "2", "15"], vocab: 1163 },
    ];
    let rows_e = [
        Row { label: "Ego4D train", filter: StatsFilter::Train, videos: 41973, annos: 96336, duration: ["2.5", "0.03", "10.0"], count: ["4.7", "2", "121"], text: ["7.2", "1", "23"], vocab: 3314 },
        Row { label: "Ego4D consistent train", filter: StatsFilter::ConsistentTrain, videos: 33370, annos: 70179, duration: ["2.5", "0.1", "10.0"], count: ["4.7", "2", "71"], text: ["7.2", "1", "21"], vocab: 2866 },
        Row { label: "Ego4D test", filter: StatsFilter::Test, videos: 8692, annos: 20409, duration: ["2.5", "0.10", "10.00"], count: ["4.8", "2", "61"], text: ["7.2", "1", "21"], vocab: 1826 },
    ];
    let mut problems = Vec::new();
    let mut all = Vec::new();
    for (path, source, rows) in [(kinetics, Source::Kinetics, &rows_k), (ego, Source::Ego4D, &rows_e)] {
        let records = match std::fs::read(&path).map_err(|e| e.to_string()).and_then(|b| {
            parse_release(&b, source).map_err(|e| e.to_string())
        }) {
            Ok(r) => r,
            Err(e) => return Outcome::Fail(format!("{}: {e}", Path::new(&path).display())),
        };
        for row in rows.iter() {
            match compute_stats(&records, row.filter) {
                Ok(s) => problems.extend(row_mismatches(&s, row).into_iter().map(|m| format!("{}: {m}", row.label))),
                Err(e) => problems.push(format!("{}: {e}", row.label)),
            }
        }
        all.extend(records);
    }
    match compute_stats(&all, StatsFilter::All) {
        Ok(s) if s.count.min == 2.0 && s.count.max == 121.0 => {}
        Ok(s) => problems.push(format!("aggregate count range {}..{} != 2..121", s.count.min, s.count.max)),
        Err(e) => problems.push(e.to_string()),
    }
    if problems.is_empty() {
        Outcome::Pass("6 split rows and aggregate count range 2..121 reproduced".into())
    } else {
        Outcome::Fail(problems.join("; "))
    }
}

fn narration_fixture() -> Outcome {
    let yes = [
        "C cuts the tree with the chainsaw in his right hand.",
        "The woman Y operates a phone with her hands.",
        "C peels the potato with the knife.",
        "The man Y climbs down the stairs.",
        "C mixes the paint on the paint box with the brush.",
    ];
    let no = [
        "The man Y drops the boots on the floor.",
        "C looks around the room.",
        "C opens the garage door.",
        "The man Z passes a bag to his left hand.",
        "C enters a room.",
    ];
    let retry = RetryPolicy::immediate(1);
    let decide = |text: &str| narration_filter(&NarrationCandidate::new("v", 5.0, text), &KeywordLlm, &retry).is_repetitive();
    let got_yes = yes.iter().filter(|t| decide(t)).count();
    let got_no = no.iter().filter(|t| !decide(t)).count();
    let msg = format!("{got_yes}/5 repetitive and {got_no}/5 non-repetitive classified as listed");
    if got_yes == 5 && got_no == 5 {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("metric oracle equivalence", metric_oracle),
        ("density round-trip", density_round_trip),
        ("loss formula", loss_formula),
        ("consistency semantics", consistency_semantics),
        ("periodicity counter", periodicity_counter),
        ("pipeline determinism", pipeline_determinism),
        ("real release statistics", real_data),
        ("narration filter fixture", narration_fixture),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        match check() {
            Outcome::Pass(m) => println!("[PASS] {name}: {m}"),
            Outcome::Fail(m) => {
                println!("[FAIL] {name}: {m}");
                failed.push(name);
            }
            Outcome::Skip(m) => println!("[SKIP] {name}: {m}"),
        }
    }
    if !failed.is_empty() {
        eprintln!("{} acceptance criteria failed", failed.len());
        std::process::exit(1);
    }
}
