mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use repforge_core::annotation::StatsFilter;
use repforge_core::curation::Stage;
use repforge_core::{Normalization, Source};

#[derive(Parser)]
#[command(name = "repforge", version, about = "Build, check and evaluate repetition-counting datasets")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a release document.
    Ingest {
        file: PathBuf,
        #[arg(long)]
        source: Source,
        /// Also print every warning.
        #[arg(long)]
        warnings: bool,
    },
    /// Dataset statistics for one split.
    Stats {
        file: PathBuf,
        #[arg(long, default_value = "all")]
        split: StatsFilter,
        /// Defaults to detecting the source from the document.
        #[arg(long)]
        source: Option<Source>,
        #[arg(long)]
        json: bool,
    },
    /// Most frequent description words, stop words removed.
    Words {
        file: PathBuf,
        #[arg(long, default_value_t = 20)]
        top: usize,
        #[arg(long)]
        source: Option<Source>,
    },
    /// Re-run rater agreement over every clip of a release document.
    Resolve {
        file: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 1)]
        max_delta: u32,
        #[arg(long)]
        source: Option<Source>,
        /// Write the re-stamped release here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reassign Train/Test splits.
    Split {
        file: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        source: Option<Source>,
        /// File of Kinetics video ids, one per line, that must stay in Test.
        #[arg(long)]
        upstream_test: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted counts and segments against a release document.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "by-truth")]
        norm: Normalization,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        source: Option<Source>,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Count repetitions in a feature file with the periodicity counter.
    Count {
        features: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        threshold: f64,
        /// Include the density target implied by the result.
        #[arg(long)]
        emit_density: bool,
    },
    /// Generate a synthetic repeating feature sequence.
    Synth {
        #[arg(long, default_value_t = 10)]
        count: u32,
        #[arg(long, default_value_t = 20.0)]
        period: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = 40)]
        onset: usize,
        /// Noise level in dB; omit for a clean sequence.
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 300)]
        frames: usize,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        /// Feature file; `.txt` writes the text format.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Pick a score threshold from synthetic positives and noise negatives.
    Calibrate {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 320)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the curation stages.
    Pipeline {
        #[arg(long)]
        source: Source,
        /// Narration file (ego) or feature directory (exo).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "all")]
        stage: Stage,
        /// Rater script (JSON); defaults to simulated raters.
        #[arg(long)]
        raters: Option<PathBuf>,
        /// Clips sent to raters; defaults to all candidates.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
        #[arg(long, default_value_t = 0.25)]
        threshold: f64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        upstream_test: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = LlmArg::Keyword)]
        llm: LlmArg,
        /// Release document (after stage 4) or clip records (earlier stages).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stage counts as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LlmArg {
    Keyword,
    Remote,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing_subscriber::filter::LevelFilter::WARN,
        1 => tracing_subscriber::filter::LevelFilter::INFO,
        _ => tracing_subscriber::filter::LevelFilter::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
