//! `siamfv`: command-line driver.
//!
//! Exit status is 0 on success, 1 on a domain error (reported as one JSON
//! line on stderr) and 2 on a usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand, ValueEnum};
use siamfv::PosteriorMode;

#[derive(Parser, Debug)]
#[command(name = "siamfv", version, about = "Differentiable Fisher-vector aggregation and retrieval")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a GMM to the pooled training descriptors with EM.
    InitGmm(InitGmmArgs),
    /// Siamese training of the GMM and backbone.
    Train(TrainArgs),
    /// Encode every item of a manifest into a global vector.
    Encode(EncodeArgs),
    /// Compare analytic gradients with central differences on a random instance.
    Gradcheck(GradcheckArgs),
    /// Fit or apply a PCA/LDA whitening projection.
    Project(ProjectArgs),
    /// Rank a gallery for every query and report mAP.
    Eval(EvalArgs),
    /// Generate a labeled synthetic descriptor dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Posterior {
    Unweighted,
    Standard,
}

impl From<Posterior> for PosteriorMode {
    fn from(p: Posterior) -> Self {
        match p {
            Posterior::Unweighted => PosteriorMode::Unweighted,
            Posterior::Standard => PosteriorMode::Standard,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Pool {
    Fv,
    Sum,
    Max,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FitMethod {
    Pca,
    Lda,
}

#[derive(Args, Debug)]
pub struct InitGmmArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Maximum number of descriptors pooled for EM.
    #[arg(long, default_value_t = siamfv::em::DEFAULT_POOL_SIZE)]
    pub pool_size: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub gmm: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.8)]
    pub margin: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6000)]
    pub iterations_per_epoch: usize,
    /// Query/positive tuples drawn per mining round.
    #[arg(long, default_value_t = 2000)]
    pub tuples: usize,
    #[arg(long, default_value_t = 5)]
    pub negatives: usize,
    #[arg(long, default_value_t = 2000)]
    pub remine_every: usize,
    /// Start from a saved backbone instead of the identity.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub freeze_backbone: bool,
    #[arg(long)]
    pub freeze_gmm: bool,
    #[arg(long, value_enum, default_value_t = Posterior::Unweighted)]
    pub posterior: Posterior,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub gmm: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Pool::Fv)]
    pub pool: Pool,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Posterior::Unweighted)]
    pub posterior: Posterior,
    /// Dataset tag recorded on every encoded item.
    #[arg(long, default_value = "default")]
    pub dataset_tag: String,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub clusters: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = siamfv::gradcheck::DEFAULT_STEP)]
    pub step: f64,
    #[arg(long, value_enum, default_value_t = Posterior::Unweighted)]
    pub posterior: Posterior,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("action").required(true).args(["fit", "apply"])))]
pub struct ProjectArgs {
    #[arg(long, value_enum)]
    pub fit: Option<FitMethod>,
    #[arg(long, value_name = "FVP1")]
    pub apply: Option<PathBuf>,
    #[arg(long)]
    pub vectors: PathBuf,
    #[arg(long, default_value_t = 512, value_parser = PossibleValuesParser::new(["128", "256", "512"]).map(|s| s.parse::<usize>().unwrap()), conflicts_with = "apply")]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Needed when the gallery lists descriptor files.
    #[arg(long)]
    pub gmm: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Pool::Fv)]
    pub pool: Pool,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Posterior::Unweighted)]
    pub posterior: Posterior,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub items_per_class: usize,
    #[arg(long)]
    pub descriptors_per_item: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Classes held out as the evaluation split (default: a quarter when at
    /// least two).
    #[arg(long)]
    pub eval_classes: Option<usize>,
    #[arg(long, default_value = "synth")]
    pub dataset_tag: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("{}", commands::error_line("usage", "--threads must be at least 1"));
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", commands::error_line("threads", &e.to_string()));
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", commands::describe_error(&e));
            ExitCode::from(1)
        }
    }
}
