//! `msenets`: dataset generation, training, evaluation, annotation fusion and
//! gradient self-checks.
//!
//! Exit codes: 0 success, 1 runtime or data failure, 2 usage error.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msenets::fusion::FusionStrategy;
use msenets::synth::ShapeFamily;

use crate::config::RunConfigFile;

#[derive(Debug, Parser)]
#[command(name = "msenets", version, about = "Multi-annotator segmentation ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-annotator dataset.
    GenData(GenDataArgs),
    /// Train an ensemble and write its trace and checkpoints.
    Train(TrainArgs),
    /// Score saved checkpoints on the test split.
    Eval(EvalArgs),
    /// Collapse every sample's annotations into one mask.
    Fuse(FuseArgs),
    /// Compare analytic and finite-difference gradients of the reference model.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of simulated annotators.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 20)]
    pub n_multi: usize,
    #[arg(long, default_value_t = 80)]
    pub n_unann: usize,
    #[arg(long, default_value_t = 10)]
    pub n_val: usize,
    #[arg(long, default_value_t = 50)]
    pub n_test: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value = "ellipse", value_parser = parse_shape)]
    pub shape: ShapeFamily,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat TOML file with run settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub w_max: Option<f64>,
    #[arg(long)]
    pub validation_every: Option<usize>,
    /// Disable the prediction-consistency term.
    #[arg(long)]
    pub ablate_pc: bool,
    /// Disable the pseudo-supervision term.
    #[arg(long)]
    pub ablate_ps: bool,
    /// Train every network on this annotator only.
    #[arg(long, value_name = "INDEX")]
    pub single_annotator: Option<usize>,
    #[arg(long)]
    pub no_unannotated: bool,
    /// fused or per-network.
    #[arg(long)]
    pub selection: Option<String>,
    /// Fusion used to build validation references.
    #[arg(long, value_parser = parse_strategy)]
    pub val_reference: Option<FusionStrategy>,
}

impl TrainArgs {
    fn overrides(&self) -> RunConfigFile {
        RunConfigFile {
            data: self.data.clone(),
            out: self.out.clone(),
            seed: self.seed,
            total_iters: self.iters,
            lr: self.lr,
            alpha: self.alpha,
            beta: self.beta,
            w_max: self.w_max,
            validation_every: self.validation_every,
            use_pc: self.ablate_pc.then_some(false),
            use_ps: self.ablate_ps.then_some(false),
            use_unannotated: self.no_unannotated.then_some(false),
            single_annotator: self.single_annotator.map(|i| i as i64),
            selection: self.selection.clone(),
            val_reference: self.val_reference.map(|s| s.name().to_string()),
            ..Default::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A training output directory or its `checkpoints` directory.
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also score each network alone.
    #[arg(long)]
    pub per_network: bool,
    /// Write the CSV here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// average-vote, random or staple.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: FusionStrategy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Perturb one analytic gradient coordinate; the check must then fail.
    #[arg(long)]
    pub corrupt: bool,
}

fn parse_strategy(s: &str) -> Result<FusionStrategy, String> {
    s.parse().map_err(|e: msenets::Error| e.to_string())
}

fn parse_shape(s: &str) -> Result<ShapeFamily, String> {
    match s {
        "ellipse" => Ok(ShapeFamily::Ellipse),
        "blob" => Ok(ShapeFamily::Blob),
        "nested" => Ok(ShapeFamily::Nested),
        other => Err(format!("unknown shape {other:?} (ellipse, blob, nested)")),
    }
}

/// Failure of a command, mapped to the exit code convention.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<msenets::Error> for CliError {
    fn from(e: msenets::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => run::gen_data(&a),
        Command::Train(a) => run::train(&a),
        Command::Eval(a) => run::eval(&a),
        Command::Fuse(a) => run::fuse(&a),
        Command::GradCheck(a) => run::grad_check(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `msenets --help` for usage");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
