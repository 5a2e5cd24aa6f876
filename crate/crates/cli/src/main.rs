//! `feddy`: ingest annotations, synthesize scenes, train, evaluate and
//! benchmark from one binary.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

mod commands;
mod config;
mod manifest;

use clap::{Args, Parser, Subcommand};
use config::{DataSource, RunConfig};
use feddy_core::dynamic_gnn::Activation;
use feddy_core::federated::{Mode, PartitionStrategy};
use std::path::PathBuf;
use std::process::ExitCode;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(Vec<String>),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(vec![msg.into()])
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "feddy", version, about = "Federated dynamic-GNN trajectory learning with secure aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an SDD annotation file into a native sequence and print statistics.
    Ingest(IngestArgs),
    /// Write the synthetic scene a config would train on.
    Synth(SynthArgs),
    /// Train a model; writes a checkpoint, metrics CSV and manifest.
    Train(TrainArgs),
    /// Compare a checkpoint with the constant-position baseline on a sequence.
    Eval(EvalArgs),
    /// Time secure aggregation across user counts and embedding sizes.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    /// SDD `annotations.txt` file.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub width: f64,
    #[arg(long)]
    pub height: f64,
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    /// Native sequence output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional color sidecar CSV: `track_id,frame,c1..c15`.
    #[arg(long)]
    pub colors: Option<PathBuf>,
    #[arg(long)]
    pub include_lost: bool,
    #[arg(long)]
    pub exclude_occluded: bool,
    #[arg(long)]
    pub exclude_generated: bool,
    /// Also print the node count of every frame.
    #[arg(long)]
    pub per_frame: bool,
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Which synthetic video to write.
    #[arg(long, default_value_t = 0)]
    pub video: usize,
    /// Native sequence output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

/// Config file plus flag overrides shared by `synth` and `train`.
#[derive(Args, Default)]
pub struct RunArgs {
    /// TOML config, or a JSON manifest from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub source: Option<DataSource>,
    /// Input file (repeatable) for native or sdd sources.
    #[arg(long = "data")]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_parser = parse_activation)]
    pub activation: Option<Activation>,
    #[arg(long)]
    pub delta_t: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub sync_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_partition)]
    pub partition: Option<PartitionStrategy>,
    #[arg(long)]
    pub modulus_bits: Option<u64>,
    #[arg(long)]
    pub fixed_e: Option<u32>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    parse_enum(s)
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    parse_enum(s)
}

fn parse_partition(s: &str) -> Result<PartitionStrategy, String> {
    parse_enum(s)
}

impl RunArgs {
    /// Loads the config (or defaults) and applies every flag that was given.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => config::load(path).map_err(CliError::Validation)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.source, cfg.data.source);
        if !self.data.is_empty() {
            cfg.data.paths = self.data.clone();
        }
        set!(self.videos, cfg.data.videos);
        set!(self.d, cfg.model.d);
        set!(self.layers, cfg.model.n);
        set!(self.alpha, cfg.model.alpha);
        set!(self.beta, cfg.model.beta);
        set!(self.activation, cfg.model.activation);
        set!(self.delta_t, cfg.model.delta_t);
        set!(self.mode, cfg.training.mode);
        set!(self.m, cfg.training.m);
        set!(self.eta, cfg.training.eta);
        set!(self.epochs, cfg.training.epochs);
        set!(self.sync_every, cfg.training.sync_every);
        set!(self.seed, cfg.training.seed);
        set!(self.partition, cfg.training.partition);
        set!(self.modulus_bits, cfg.secure.modulus_bits);
        set!(self.fixed_e, cfg.secure.fixed_e);
        set!(self.out_dir, cfg.output.dir);

        let errs = config::validate(&cfg);
        if !errs.is_empty() {
            return Err(CliError::Validation(errs));
        }
        // scenes are seeded from the run seed; the resolved config shows which
        cfg.synth.seed = config::Seeds::derive(cfg.training.seed).synth;
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Native sequence to evaluate on.
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub delta_t: usize,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = feddy_core::bench::DEFAULT_REPEATS)]
    pub repeats: usize,
    #[arg(long, default_value_t = feddy_core::secure_agg::DEFAULT_MODULUS_BITS)]
    pub modulus_bits: u64,
    /// User counts, comma separated.
    #[arg(long = "m", value_delimiter = ',', default_values_t = [2usize, 5, 10, 20])]
    pub m_values: Vec<usize>,
    /// Embedding dimensions, comma separated.
    #[arg(long = "d", value_delimiter = ',', default_values_t = [32usize, 64, 128])]
    pub d_values: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Worker threads; defaults to every available core.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(errs)) => {
            eprintln!("invalid input ({} problem{}):", errs.len(), if errs.len() == 1 { "" } else { "s" });
            for e in errs {
                eprintln!("  - {e}");
            }
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
