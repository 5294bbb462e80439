//! `simon`: synthetic data, training, streaming inference, evaluation and
//! benchmarking from the command line.

mod commands;

use clap::{Args, Parser, Subcommand};
use simon_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "simon", version, about = "Online temporal action localization")]
struct Cli {
    /// Print errors as one JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (feature files plus annotations).
    Synth(SynthArgs),
    /// Train a model on feature files and annotations.
    Train(TrainArgs),
    /// Stream feature files through a model and write instances as JSON lines.
    Infer(InferArgs),
    /// Localization mAP over tIoU thresholds.
    EvalTal(EvalTalArgs),
    /// Point-level mAP of action starts over offset tolerances.
    EvalOdas(EvalOdasArgs),
    /// Quantize an annotation to chunk indices and merge same-class neighbours.
    GtConvert(GtConvertArgs),
    /// Per-step latency and state size on a random stream.
    Bench(BenchArgs),
    /// Linearly resample a feature file to a fixed length.
    Resample(ResampleArgs),
}

/// Overrides for every configuration key. Applied after `--config`.
#[derive(Args, Clone, Default)]
pub struct Overrides {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds initialization, shuffling and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_model: Option<String>,
    #[arg(long)]
    pub d_in: Option<String>,
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long)]
    pub blocks: Option<String>,
    #[arg(long)]
    pub d_mid: Option<String>,
    #[arg(long)]
    pub d_c: Option<String>,
    /// Number of past visual contexts kept as keys.
    #[arg(long)]
    pub k: Option<String>,
    /// Per-class decode threshold.
    #[arg(long)]
    pub threshold: Option<String>,
    /// Frames per chunk.
    #[arg(long)]
    pub chunk_len: Option<String>,
    #[arg(long)]
    pub fps: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long)]
    pub lr_main: Option<String>,
    #[arg(long)]
    pub lr_ctx: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub lr_step_size: Option<String>,
    #[arg(long)]
    pub lr_factor: Option<String>,
    #[arg(long)]
    pub dropout: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<String>,
    /// `truncated` or `full`.
    #[arg(long)]
    pub backprop: Option<String>,
}

impl Overrides {
    pub fn pairs(&self) -> Vec<(&'static str, &str)> {
        let fields: [(&'static str, &Option<String>); 22] = [
            ("d_model", &self.d_model),
            ("d_in", &self.d_in),
            ("classes", &self.classes),
            ("heads", &self.heads),
            ("blocks", &self.blocks),
            ("d_mid", &self.d_mid),
            ("d_c", &self.d_c),
            ("k", &self.k),
            ("threshold", &self.threshold),
            ("chunk_len", &self.chunk_len),
            ("fps", &self.fps),
            ("alpha", &self.alpha),
            ("gamma", &self.gamma),
            ("lr_main", &self.lr_main),
            ("lr_ctx", &self.lr_ctx),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("lr_step_size", &self.lr_step_size),
            ("lr_factor", &self.lr_factor),
            ("dropout", &self.dropout),
            ("weight_decay", &self.weight_decay),
            ("backprop", &self.backprop),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub streams: usize,
    /// Chunks per stream.
    #[arg(long, default_value_t = 60)]
    pub len: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub d_in: usize,
    /// Fraction of chunks covered by each class.
    #[arg(long, default_value_t = 0.3)]
    pub density: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    /// Frames per chunk.
    #[arg(long, default_value_t = 6)]
    pub l: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory of `<id>.simf` feature files with `<id>.json` annotations.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Append-only CSV training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: Overrides,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Feature files; the file stem is the video id.
    #[arg(long, num_args = 1.., required = true)]
    pub features: Vec<PathBuf>,
    /// Predictions file (JSON lines). A `.meta.json` sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Videos processed in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub cfg: Overrides,
}

#[derive(Args)]
pub struct EvalTalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Annotation files or directories of them.
    #[arg(long, num_args = 1.., required = true)]
    pub annotations: Vec<PathBuf>,
    /// Comma-separated tIoU thresholds.
    #[arg(long, default_value = "0.3,0.4,0.5,0.6,0.7")]
    pub thresholds: String,
    /// `chunks` compares against quantized, merged ground truth; `seconds`
    /// against the raw annotation.
    #[arg(long, default_value = "chunks")]
    pub unit: String,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalOdasArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub annotations: Vec<PathBuf>,
    /// Comma-separated offsets in seconds.
    #[arg(long, default_value = "1,2,3,4,5,6,7,8,9,10")]
    pub offsets: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GtConvertArgs {
    #[arg(long)]
    pub annotation: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the annotation's fps.
    #[arg(long)]
    pub fps: Option<f64>,
    /// Overrides the annotation's frames per chunk.
    #[arg(long)]
    pub l: Option<usize>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Checkpoint to time; a freshly initialized model otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Stream length per run.
    #[arg(long, default_value_t = 1000)]
    pub t: usize,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: Overrides,
}

#[derive(Args)]
pub struct ResampleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub len: usize,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Format { .. } | Error::Json(_) | Error::Input(_) | Error::Dimension { .. } => EXIT_FORMAT,
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Contract(_) | Error::Protocol(_) | Error::Io(_) => EXIT_FAILURE,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension { .. } => "dimension",
        Error::Contract(_) => "contract",
        Error::Protocol(_) => "protocol",
        Error::Input(_) => "input",
        Error::Config(_) => "config",
        Error::Format { .. } => "format",
        Error::NonFinite(_) => "non_finite",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn report(json: bool, kind: &str, message: &str, code: u8) -> ExitCode {
    if json {
        let v = serde_json::json!({ "error": kind, "message": message, "exit_code": code });
        eprintln!("{v}");
    } else {
        eprintln!("error: {message}");
    }
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let json = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if json => return report(true, "usage", e.to_string().trim(), EXIT_USAGE),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::EvalTal(a) => commands::eval_tal(a),
        Command::EvalOdas(a) => commands::eval_odas(a),
        Command::GtConvert(a) => commands::gt_convert(a),
        Command::Bench(a) => commands::bench(a),
        Command::Resample(a) => commands::resample(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(cli.json_errors, kind(&e), &e.to_string(), exit_code(&e)),
    }
}
