use std::collections::HashSet;
use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repforge_core::annotation::{
    compute_stats, default_stop_words, serialize_release, validate, word_frequencies, Severity, Triple,
};
use repforge_core::consistency::{assign_splits, finalize, resolve};
use repforge_core::curation::{
    load_feature_dir, load_narrations, released, run_pipeline, KeywordLlm, LlmClient, PipelineConfig, PipelineInput,
    RaterPanel, RetryPolicy, ScriptedPanel, SimulatedPanel, Stage,
};
use repforge_core::density::build_density;
use repforge_core::metrics::{evaluate, format_table};
use repforge_core::periodicity::{calibrate_threshold, clip_score, count_and_localize, passes_threshold};
use repforge_core::synthgen::{generate, generate_noise};
use repforge_core::{AgreementPolicy, ClipState, CounterConfig, FeatureSequence, Source, Split, SynthSpec, Verdict};
use serde::Serialize;

use crate::data::{eval_pairs, read_release, write_output};
use crate::{Command, LlmArg, SplitArg};

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Ingest { file, source, warnings } => ingest(&file, source, warnings),
        Command::Stats {
            file,
            split,
            source,
            json,
        } => {
            let (_, records) = read_release(&file, source)?;
            let stats = compute_stats(&records, split)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                let row = |t: Triple| format!("avg {:.2}  min {:.2}  max {:.2}", t.avg, t.min, t.max);
                println!("videos          {}", stats.num_videos);
                println!("annotations     {}", stats.num_annotations);
                println!("duration (s)    {}", row(stats.duration));
                println!("count           {}", row(stats.count));
                println!("text length     {}", row(stats.text_length));
                println!("vocabulary      {}", stats.vocab_size);
                println!("total words     {}", stats.total_words);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Words { file, top, source } => {
            let (_, records) = read_release(&file, source)?;
            for (word, n) in word_frequencies(&records, &default_stop_words()).into_iter().take(top) {
                println!("{n:>8}  {word}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Resolve {
            file,
            iou,
            max_delta,
            source,
            out,
        } => resolve_cmd(&file, iou, max_delta, source, out.as_deref()),
        Command::Split {
            file,
            train_frac,
            seed,
            source,
            upstream_test,
            out,
        } => {
            let (_, mut records) = read_release(&file, source)?;
            let upstream = upstream_test.as_deref().map(read_id_list).transpose()?;
            assign_splits(&mut records, train_frac, seed, upstream.as_ref())?;
            let test = records.iter().filter(|r| r.split == Split::Test).count();
            eprintln!("{} clips: {} train, {test} test", records.len(), records.len() - test);
            write_output(out.as_deref(), &serialize_release(&records)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            pred,
            truth,
            norm,
            split,
            source,
            json,
        } => {
            let (source, records) = read_release(&truth, source)?;
            let split = match split {
                SplitArg::Train => Some(Split::Train),
                SplitArg::Test => Some(Split::Test),
                SplitArg::All => None,
            };
            let pairs = eval_pairs(&pred, source, &records, split, &AgreementPolicy::default())?;
            let report = evaluate(&pairs, norm)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", format_table(&report));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Count {
            features,
            threshold,
            emit_density,
        } => count(&features, threshold, emit_density),
        Command::Synth {
            count,
            period,
            seed,
            jitter,
            onset,
            snr,
            dim,
            frames,
            fps,
            out,
            truth,
        } => {
            let spec = SynthSpec {
                count,
                period,
                jitter,
                onset,
                noise_snr_db: snr.unwrap_or(f64::INFINITY),
                dim,
                total_frames: frames,
                fps,
                seed,
            };
            let (seq, t) = generate(&spec)?;
            write_features(&seq, &out)?;
            if let Some(path) = truth {
                let mut bytes = serde_json::to_vec_pretty(&t)?;
                bytes.push(b'\n');
                fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate { instances, frames, seed } => calibrate(instances, frames, seed),
        Command::Pipeline {
            source,
            input,
            stage,
            raters,
            sample,
            seed,
            train_frac,
            threshold,
            checkpoint,
            upstream_test,
            llm,
            out,
            report,
        } => {
            let input = match source {
                Source::Ego4D => PipelineInput::Narrations(load_narrations(&input).map_err(anyhow::Error::msg)?),
                Source::Kinetics => PipelineInput::Features(load_feature_dir(&input).map_err(anyhow::Error::msg)?),
            };
            let panel: Box<dyn RaterPanel> = match raters {
                Some(path) => Box::new(ScriptedPanel::load(&path)?),
                None => Box::new(SimulatedPanel {
                    seed,
                    ..SimulatedPanel::default()
                }),
            };
            let config = PipelineConfig {
                manual_sample: sample,
                seed,
                train_fraction: train_frac,
                candidate_threshold: threshold,
                retry: RetryPolicy::default(),
                stop_after: stage,
                checkpoint_dir: checkpoint,
                upstream_test: upstream_test.as_deref().map(read_id_list).transpose()?,
                ..PipelineConfig::default()
            };
            let client = llm_client(llm)?;
            let (records, summary) = run_pipeline(source, &input, client.as_ref(), panel.as_ref(), &config)?;
            print!("{}", summary.to_table());
            if let Some(path) = report {
                fs::write(&path, serde_json::to_vec_pretty(&summary)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(path) = out {
                let bytes = if stage == Stage::Resolution {
                    serialize_release(&released(&records))?
                } else {
                    serde_json::to_vec_pretty(&records)?
                };
                write_output(Some(&path), &bytes)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { config } => {
            let config = repforge_service::ServiceConfig::load(&config).map_err(anyhow::Error::msg)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(repforge_service::serve(config))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn ingest(file: &Path, source: Source, warnings: bool) -> Result<ExitCode> {
    let (_, records) = read_release(file, Some(source))?;
    let annotations: usize = records.iter().map(|r| r.annotations.len()).sum();
    let (mut errors, mut warns) = (0, 0);
    for record in &records {
        for v in validate(record) {
            match v.severity {
                Severity::Error => {
                    errors += 1;
                    println!("error   {}  {}: {}", record.key(), v.field, v.rule);
                }
                Severity::Warning => {
                    warns += 1;
                    if warnings {
                        println!("warning {}  {}: {}", record.key(), v.field, v.rule);
                    }
                }
            }
        }
    }
    println!("{} clips, {annotations} annotations, {errors} errors, {warns} warnings", records.len());
    Ok(if errors == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn resolve_cmd(file: &Path, iou: f64, max_delta: u32, source: Option<Source>, out: Option<&Path>) -> Result<ExitCode> {
    let policy = AgreementPolicy::new(iou, max_delta)?;
    let (_, mut records) = read_release(file, source)?;
    let (mut consistent, mut inconsistent, mut pending, mut skipped) = (0, 0, 0, 0);
    for record in &mut records {
        if !(2..=3).contains(&record.annotations.len()) {
            skipped += 1;
            continue;
        }
        let outcome = resolve(&record.annotations, &policy)?;
        let canonical = outcome.canonical.as_ref().map_or("-".to_string(), |a| a.count.to_string());
        println!("{}\t{:?}\t{canonical}", record.key(), outcome.verdict);
        match outcome.verdict {
            Verdict::Consistent => consistent += 1,
            Verdict::Inconsistent => inconsistent += 1,
            Verdict::NeedsThirdRater => {
                pending += 1;
                record.state = ClipState::Annotated;
                continue;
            }
        }
        finalize(record, &outcome);
    }
    eprintln!("{consistent} consistent, {inconsistent} inconsistent, {pending} need a third rater, {skipped} skipped");
    if let Some(path) = out {
        let kept: Vec<_> = records.into_iter().filter(|r| r.state == ClipState::Resolved).collect();
        write_output(Some(path), &serialize_release(&kept)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct CountOutput {
    count: u32,
    start_time: Option<f64>,
    end_time: Option<f64>,
    mean_score: f64,
    candidate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    density: Option<Vec<f64>>,
}

fn count(path: &Path, threshold: f64, emit_density: bool) -> Result<ExitCode> {
    let seq = read_features(path)?;
    let config = CounterConfig {
        score_threshold: threshold,
        ..CounterConfig::default()
    };
    let r = count_and_localize(&seq, &config)?;
    let density = match (emit_density, r.segment) {
        (false, _) => None,
        (true, Some(seg)) if r.count >= 2 => Some(build_density(seg, r.count, seq.len(), seq.fps())?.values),
        (true, _) => Some(vec![0.0; seq.len()]),
    };
    let out = CountOutput {
        count: r.count,
        start_time: r.segment.map(|s| s.start),
        end_time: r.segment.map(|s| s.end),
        mean_score: r.mean_score,
        candidate: passes_threshold(r.mean_score, threshold),
        density,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn calibrate(instances: usize, frames: usize, seed: u64) -> Result<ExitCode> {
    if instances == 0 {
        bail!("need at least one instance");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut positive, mut negative) = (Vec::with_capacity(instances), Vec::with_capacity(instances));
    for i in 0..instances as u64 {
        let count: u32 = rng.random_range(2..=20);
        let max_period = (frames as f64 * 0.9 / (count as f64 * 1.05)).min(120.0);
        if max_period < 4.0 {
            bail!("{frames} frames is too short for {count} cycles");
        }
        let min_period = 4.0f64.max(max_period * 0.3);
        let period = rng.random_range(min_period..=max_period);
        let span = count as f64 * period * 1.05;
        let spec = SynthSpec {
            count,
            period,
            jitter: rng.random_range(0.0..=0.05),
            onset: rng.random_range(0..=((frames as f64 - span).floor() as usize)),
            noise_snr_db: rng.random_range(10.0..=30.0),
            dim: 16,
            total_frames: frames,
            fps: 30.0,
            seed: seed.wrapping_add(i),
        };
        positive.push(clip_score(&generate(&spec)?.0)?);
        let noise = generate_noise(frames, 16, 30.0, seed.wrapping_add(1 << 32).wrapping_add(i))?;
        negative.push(clip_score(&noise)?);
    }
    let point = calibrate_threshold(&positive, &negative).context("no operating point")?;
    let rate = |xs: &[f64], t: f64| xs.iter().filter(|&&x| passes_threshold(x, t)).count() as f64 / xs.len() as f64;
    let default = repforge_core::periodicity::CANDIDATE_THRESHOLD;
    println!("{:<10} {:>9} {:>6} {:>6}", "", "threshold", "TPR", "FPR");
    println!(
        "{:<10} {:>9.4} {:>6.3} {:>6.3}",
        "best", point.threshold, point.true_positive_rate, point.false_positive_rate
    );
    println!(
        "{:<10} {:>9.4} {:>6.3} {:>6.3}",
        "default",
        default,
        rate(&positive, default),
        rate(&negative, default)
    );
    Ok(ExitCode::SUCCESS)
}

fn llm_client(kind: LlmArg) -> Result<Box<dyn LlmClient>> {
    match kind {
        LlmArg::Keyword => Ok(Box::new(KeywordLlm)),
        #[cfg(feature = "remote-llm")]
        LlmArg::Remote => Ok(Box::new(repforge_core::curation::RemoteLlm::from_env()?)),
        #[cfg(not(feature = "remote-llm"))]
        LlmArg::Remote => bail!("this build has no remote LLM client; rebuild with --features remote-llm"),
    }
}

fn read_id_list(path: &Path) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn read_features(path: &Path) -> Result<FeatureSequence> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    FeatureSequence::read(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn write_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let w = std::io::BufWriter::new(f);
    if path.extension().is_some_and(|e| e == "txt") {
        seq.write_text(w)?;
    } else {
        seq.write_binary(w)?;
    }
    Ok(())
}
