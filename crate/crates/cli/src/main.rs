//! `proxcurate`: command-line driver for the proximity-curation engine.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

const LONG_ABOUT: &str = "\
Proximity-based data curation: measure how far candidate datasets sit from a
target distribution, train a proximity estimator, score a candidate pool, and
select the top-K closest samples.

Typical pipeline:
  proxcurate synth --preset standard --part target --out target.fst
  proxcurate synth --preset standard --part pool --out pool.fst
  proxcurate train --target target.fst --pool pool.fst --out est.json
  proxcurate score --method learned --est est.json --pool pool.fst --out scores.jsonl
  proxcurate select --scores scores.jsonl --k 2000 --out manifest.jsonl
  proxcurate report --kind recovery --manifest manifest.jsonl --truth pool.truth.jsonl

Reference settings: selection keeps the top 1,200,000 samples by proximity
score, and estimator training stops early once validation accuracy reaches
0.90.

Any flag may also come from a JSON object passed with --config; flags given
on the command line take precedence.";

#[derive(Debug, Parser)]
#[command(name = "proxcurate", version, about = "Proximity-based data curation", long_about = LONG_ABOUT)]
#[command(args_override_self = true)]
struct Cli {
    /// Seed for every random choice (subsampling, batching, synthesis).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    /// JSON object of flag values, overridden by explicit flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a JSON-lines vector dump into a feature store.
    Ingest(IngestArgs),
    /// Check a feature store for corruption, non-finite values and duplicate ids.
    Validate(ValidateArgs),
    /// Pairwise squared-MMD matrix between every dataset in the given stores.
    Mmd(MmdArgs),
    /// Train the proximity estimator (target rows vs. candidate pool).
    Train(TrainArgs),
    /// Score every pool record with the learned estimator or a baseline.
    Score(ScoreArgs),
    /// Keep the K closest records of a score table.
    Select(SelectArgs),
    /// Composition, histogram, shift or recovery report.
    Report(ReportArgs),
    /// Uniformity diversity of a store or of a selection from it.
    Diversity(DiversityArgs),
    /// Sample a synthetic Gaussian-mixture store with a ground-truth sidecar.
    Synth(SynthArgs),
}

const SUBCOMMANDS: &[&str] = &[
    "ingest",
    "validate",
    "mmd",
    "train",
    "score",
    "select",
    "report",
    "diversity",
    "synth",
];

#[derive(Debug, Args, Serialize)]
struct IngestArgs {
    /// Vector dump: one {"id","dataset","vector","key"?,"aux"?} object per line.
    #[arg(long)]
    input: PathBuf,
    /// Output `.fst` path; the metadata sidecar is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ValidateArgs {
    #[arg(long)]
    store: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum MmdEstimator {
    Biased,
    Unbiased,
}

#[derive(Debug, Args, Serialize)]
struct MmdArgs {
    /// Feature stores; each dataset label inside becomes one group.
    #[arg(long = "store", required = true)]
    stores: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = MmdEstimator::Biased)]
    estimator: MmdEstimator,
    /// Rows kept per group.
    #[arg(long, default_value_t = 2000)]
    subsample_cap: usize,
    /// Pooled rows used for the median-heuristic bandwidth.
    #[arg(long, default_value_t = 1000)]
    bandwidth_cap: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Target (positive) store.
    #[arg(long)]
    target: PathBuf,
    /// Candidate pool (negative) store.
    #[arg(long)]
    pool: PathBuf,
    /// Output estimator JSON.
    #[arg(long)]
    out: PathBuf,
    /// Z-score features with statistics from the training split.
    #[arg(long)]
    standardize: bool,
    /// Samples per step, half from each class.
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    max_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    step_size: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Stop once validation accuracy reaches this value (reference setting 0.90).
    #[arg(long, default_value_t = 0.90)]
    early_stop: f64,
    /// Fraction of each class held out for validation.
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Steps between validation checks.
    #[arg(long, default_value_t = 5)]
    eval_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Method {
    Learned,
    Avgdist,
    Ppl,
    Dppl,
}

#[derive(Debug, Args, Serialize)]
struct ScoreArgs {
    #[arg(long, value_enum, default_value_t = Method::Learned)]
    method: Method,
    /// Store to score.
    #[arg(long)]
    pool: PathBuf,
    /// Output score table (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Trained estimator, for `learned`.
    #[arg(long)]
    est: Option<PathBuf>,
    /// Target store, for `avgdist`.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Target rows used by `avgdist`.
    #[arg(long, default_value_t = 2000)]
    avg_distance_cap: usize,
}

#[derive(Debug, Args, Serialize)]
struct SelectArgs {
    /// Score table from `score`.
    #[arg(long)]
    scores: PathBuf,
    /// Number of records to keep (reference setting 1,200,000).
    #[arg(long)]
    k: usize,
    /// Output manifest (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ReportKind {
    /// Dataset shares of a manifest.
    Composition,
    /// Binned score distribution of a table.
    Histogram,
    /// Pool versus selected score distributions.
    Shift,
    /// Precision and recall against a truth sidecar.
    Recovery,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    #[arg(long, value_enum)]
    kind: ReportKind,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Ground-truth sidecar, for `recovery`.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// Split histogram counts per dataset.
    #[arg(long)]
    by_dataset: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct DiversityArgs {
    #[arg(long)]
    store: PathBuf,
    /// Restrict to the records of this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Kernel temperature.
    #[arg(long, default_value_t = 2.0)]
    t: f64,
    /// Largest point count evaluated exactly.
    #[arg(long, default_value_t = 4096)]
    exact_threshold: usize,
    /// Sampled pairs for larger sets.
    #[arg(long, default_value_t = 200_000)]
    pair_samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    /// 32-d pool of 20,000 with 2,000 planted points; K = 2,000.
    Standard,
    /// 8-d pool whose planted points span four sub-modes; K = 1,000.
    Submode,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Part {
    Target,
    Pool,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    /// Mixture spec JSON ({"dim","seed","components":[...]}); its own seed is used.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    /// Built-in benchmark, seeded by --seed.
    #[arg(long, value_enum, requires = "part")]
    preset: Option<Preset>,
    /// Which side of the preset benchmark to sample.
    #[arg(long, value_enum)]
    part: Option<Part>,
    /// Output `.fst`; metadata and truth sidecars are written beside it.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let args = match config::expand_args(raw, SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
