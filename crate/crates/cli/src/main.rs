use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxpose_cli::commands::{self, EvalArgs, Globals, PsmArgs, TrainArgs};
use ctxpose_cli::failure::CliResult;

#[derive(Parser)]
#[command(name = "ctxpose", version, about = "Context modeling for voxel-based 3D pose: data, inference, training, evaluation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct GlobalArgs {
    /// Experiment config (JSON). Unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seeds and the generator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; default is the number of available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset.
    Generate,
    /// Exact PSM inference by dynamic programming.
    #[command(alias = "psm-infer")]
    InferPsm {
        /// A single feature volume instead of the configured dataset.
        #[arg(long)]
        unary: Option<PathBuf>,
        #[arg(long)]
        skeleton: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        root: usize,
        /// Limb-length window, mm (default: half the voxel diagonal).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Cross-check against exhaustive search where it is small enough.
        #[arg(long)]
        oracle: bool,
    },
    /// Train the configured method.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate predictions against ground truth.
    Eval {
        /// Predicted poses (CSV).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Predict the held-out split with a model checkpoint instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ground-truth poses (CSV); defaults to the dataset's held-out split.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Per-sample differences between two evaluated runs (negative: candidate better).
    Compare {
        /// samples.csv of the baseline run.
        #[arg(long)]
        baseline: PathBuf,
        /// samples.csv of the candidate run.
        #[arg(long)]
        candidate: PathBuf,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        /// Number of consecutive seeds starting at the first configured seed.
        #[arg(long, default_value_t = 50)]
        seeds: u64,
    },
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    let g = Globals {
        config: cli.global.config,
        seed: cli.global.seed,
        out: cli.global.out,
    };
    ctxpose::parallel::set_threads(cli.global.threads.unwrap_or(0));
    let cfg = g.load()?;
    match cli.cmd {
        Cmd::Generate => commands::cmd_generate(&cfg),
        Cmd::InferPsm { unary, skeleton, root, epsilon, oracle } => {
            commands::cmd_infer_psm(&cfg, &PsmArgs { unary, skeleton, root, epsilon, oracle })
        }
        Cmd::Train { resume } => commands::cmd_train(&cfg, &TrainArgs { resume }),
        Cmd::Eval { pred, checkpoint, gt } => commands::cmd_eval(&cfg, &EvalArgs { pred, checkpoint, gt }),
        Cmd::Compare { baseline, candidate } => commands::cmd_compare(&cfg, &baseline, &candidate),
        Cmd::Gradcheck { seeds } => commands::cmd_gradcheck(&cfg, seeds),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CTXPOSE_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            // a closed pipe is not an error worth reporting
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&summary).expect("serializable"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
