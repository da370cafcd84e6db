//! `motionsplat`: synthesize blurred avatar datasets, train, render and evaluate.
//!
//! Exit status is 0 on success, 1 for bad usage and 2 when a command fails
//! at run time.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use motionsplat::blur::Interpolation;
use motionsplat::gradcheck::Scope;

pub const THREADS_ENV: &str = "MOTIONSPLAT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "motionsplat", version, about = "Blur-aware articulated Gaussian avatars on the CPU")]
pub struct Cli {
    /// Worker threads for the global pool (default: one per core).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    /// More log output; repeat for debug detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic blurred dataset with sharp ground truth.
    Synth(SynthArgs),
    /// Fit an avatar to a dataset.
    Train(TrainArgs),
    /// Render a sharp image from a checkpoint.
    Render(RenderArgs),
    /// Score sharp renders against the held-out ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences on random scenes.
    Gradcheck(GradcheckArgs),
    /// Train once per virtual-pose count and tabulate the results.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML or JSON synthesis config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Sub-frames per exposure: small (17), medium (33), large (49) or an odd count.
    #[arg(long, value_parser = parse_blur_size)]
    pub blur_size: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Gaussians in the ground-truth cloud.
    #[arg(long)]
    pub gaussians: Option<usize>,
    /// Standard deviation of the per-joint rotation noise on input poses, in radians.
    #[arg(long)]
    pub pose_noise: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct TrainOptions {
    /// TOML or JSON file with `[train]` and `[model]` tables; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Total iterations; stage starts and the densification window scale along.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Virtual poses averaged per blurred frame.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(Interpolation))]
    pub interpolation: Option<Interpolation>,
    /// Ablation: every step renders the input pose sharply.
    #[arg(long)]
    pub no_motion_model: bool,
    /// Ablation: supervise the plain blur average, no fusion mask.
    #[arg(long)]
    pub no_fusion: bool,
    /// Narrow networks and a smaller initial cloud.
    #[arg(long)]
    pub compact: bool,
    /// Initial Gaussian count.
    #[arg(long)]
    pub gaussians: Option<usize>,
    /// Upper bound on the cloud size during densification.
    #[arg(long)]
    pub max_gaussians: Option<usize>,
    /// Trajectory gradients by central differences instead of backpropagation.
    #[arg(long)]
    pub fd_trajectories: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory (default: runs/<dataset name>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub opts: TrainOptions,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frame index whose learned pose is rendered.
    #[arg(long, conflicts_with = "pose", required_unless_present = "pose")]
    pub frame: Option<usize>,
    /// JSON pose file; any pose the skeleton accepts, in or out of the training range.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    /// Dataset providing the cameras.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `train`, `eval<k>` (needs --data) or a JSON camera file.
    #[arg(long, default_value = "train")]
    pub camera: String,
    /// Output image, `.png` or `.pfm`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to score.
    #[arg(long, required_unless_present = "ground_truth")]
    pub checkpoint: Option<PathBuf>,
    /// Score the dataset's own ground-truth cloud at the true centre poses.
    #[arg(long, conflicts_with = "checkpoint")]
    pub ground_truth: bool,
    /// Metrics CSV (per frame plus a `mean` row).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random scenes per module.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// all, tinynet, render or full.
    #[arg(long, default_value = "all")]
    pub module: Scope,
    /// Largest relative error accepted.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory receiving one run per n plus `sweep.csv`.
    #[arg(long, default_value = "runs/sweep")]
    pub out: PathBuf,
    /// Comma-separated virtual-pose counts.
    #[arg(long, value_delimiter = ',', default_values_t = vec![3, 5, 7, 9, 13])]
    pub ns: Vec<usize>,
    #[command(flatten)]
    pub opts: TrainOptions,
}

fn parse_blur_size(s: &str) -> Result<usize, String> {
    use motionsplat::synthdata::{BLUR_LARGE, BLUR_MEDIUM, BLUR_SMALL};
    match s {
        "small" => Ok(BLUR_SMALL),
        "medium" => Ok(BLUR_MEDIUM),
        "large" => Ok(BLUR_LARGE),
        _ => match s.parse::<usize>() {
            Ok(m) if m % 2 == 1 => Ok(m),
            Ok(m) => Err(format!("blur size must be odd, got {m}")),
            Err(_) => Err(format!("expected small, medium, large or an odd integer, got {s:?}")),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };

    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    let outcome = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Render(a) => commands::render(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<config::UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
