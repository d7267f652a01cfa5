mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "foresight", version, about = "Object-centric 6-DoF trajectory forecasting")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic window dataset or detection stream.
    SynthGen(SynthGenArgs),
    /// Curate a detection stream into windows with funnel statistics.
    Curate(CurateArgs),
    /// Train a model and write a checkpoint plus loss curve.
    Train(TrainArgs),
    /// Draw trajectory samples for one window.
    Sample(SampleArgs),
    /// Score a checkpoint and the baselines on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate one model per (C, H) cell.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Print a human-readable summary of any produced file.
    Inspect(InspectArgs),
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    ConstantVelocity,
    Bimodal,
    Mixed,
    Stream,
}

#[derive(Args, Debug)]
pub struct SynthGenArgs {
    #[arg(long, value_enum, default_value = "constant-velocity")]
    pub kind: SynthKind,
    /// Windows (or clips, for a stream) to generate.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON dataset or stream config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "C")]
    pub context: Option<usize>,
    #[arg(long = "H")]
    pub horizon: Option<usize>,
    /// Points per anchor cloud.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// File stem inside the output directory.
    #[arg(long)]
    pub stem: Option<String>,
}

#[derive(Args, Debug)]
pub struct CurateArgs {
    /// Detection stream (JSONL, one frame per line).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "C")]
    pub context: Option<usize>,
    #[arg(long = "H")]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training windows (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long = "C")]
    pub context: Option<usize>,
    #[arg(long = "H")]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Clip id of the window; defaults to the first window.
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Omit to score the baselines only.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Best-of-N samples per window for the model.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long = "H")]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Training windows carrying the largest C and H.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long = "C", value_delimiter = ',', required = true)]
    pub contexts: Vec<usize>,
    #[arg(long = "H", value_delimiter = ',', required = true)]
    pub horizons: Vec<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// JSON with an optional `model` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of probed parameters.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Diffusion timestep at which the loss is evaluated.
    #[arg(long, default_value_t = 400)]
    pub timestep: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub file: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::SynthGen(a) => commands::synth_gen(a),
        Command::Curate(a) => commands::curate(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
