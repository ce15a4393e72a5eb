//! `splatbev`: scene generation, fitting, rendering, BEV projection, staged
//! training, evaluation, height sweeps and gradient checks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::commands::Ctx;
use crate::config::{parse_resolution, Overrides, ResolutionTarget, RunConfig};
use crate::error::{code, CliError};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag or subcommand, malformed flag value)
  3  invalid configuration (unknown key, out-of-range value)
  4  missing or unreadable input, or unwritable output
  5  malformed input file (bad magic, truncated, count mismatch)
  6  numerical failure or violated invariant in the pipeline
  7  gradient check above tolerance

Set SPLATBEV_LOG (error, warn, info, debug, trace) for log output on stderr.";

#[derive(Parser)]
#[command(name = "splatbev", version, about = "Differentiable Gaussian splatting with a bird's-eye-view head", after_help = EXIT_CODES)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "splatbev-out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// BEV camera height in meters (for sweep-height: sweep only this height).
    #[arg(long, global = true, value_name = "METERS", allow_negative_numbers = true)]
    bev_height: Option<f64>,
    /// Iteration budget for fitting and for each BEV training stage.
    #[arg(long, global = true, value_name = "N")]
    iters: Option<usize>,
    /// Perspective view size for gen/fit/render; square BEV grid for bev/train/eval/sweep-height.
    #[arg(long, global = true, value_name = "WxH", value_parser = parse_resolution)]
    resolution: Option<(usize, usize)>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and its ground-truth bundle.
    Gen,
    /// Fit a perturbed copy of the ground-truth splats to a bundle's views.
    Fit {
        /// Bundle directory from `gen`; generated from the seed when omitted.
        #[arg(long, value_name = "DIR")]
        bundle: Option<PathBuf>,
    },
    /// Render a scene file from the rig cameras or a cameras file.
    Render {
        #[arg(long, value_name = "PATH")]
        scene: PathBuf,
        #[arg(long, value_name = "PATH")]
        cameras: Option<PathBuf>,
    },
    /// Render the BEV feature map of a scene, optionally with head predictions.
    Bev {
        #[arg(long, value_name = "PATH")]
        scene: PathBuf,
        /// Head weights from `train`.
        #[arg(long, value_name = "PATH")]
        head: Option<PathBuf>,
    },
    /// Head-only training (stage 2), then joint fine-tuning (stage 3).
    Train,
    /// Per-class IoU of a prediction against a bundle's BEV targets.
    Eval {
        #[arg(long, value_name = "DIR")]
        bundle: PathBuf,
        /// Prediction in the mask-file layout (e.g. `bev_prediction.spm`).
        #[arg(long, value_name = "PATH", conflicts_with = "head")]
        prediction: Option<PathBuf>,
        /// Head weights; predicts from the bundle's scene.
        #[arg(long, value_name = "PATH")]
        head: Option<PathBuf>,
    },
    /// Train and evaluate a fresh head per BEV camera height.
    SweepHeight,
    /// Compare analytic gradients against central finite differences.
    CheckGrads,
}

impl Command {
    fn resolution_target(&self) -> ResolutionTarget {
        match self {
            Command::Gen | Command::Fit { .. } | Command::Render { .. } | Command::CheckGrads => ResolutionTarget::Views,
            _ => ResolutionTarget::Bev,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    let overrides = Overrides {
        seed: c.seed,
        workers: c.workers,
        bev_height: c.bev_height,
        iters: c.iters,
        resolution: c.resolution,
    };
    cfg.apply(&overrides, cli.cmd.resolution_target())?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    std::fs::create_dir_all(&c.out).map_err(|e| CliError::Input(format!("{}: {e}", c.out.display())))?;
    let ctx = Ctx {
        out: c.out.clone(),
        cfg,
    };
    splatbev_core::io::write_bytes(&ctx.out.join("resolved_config.toml"), ctx.cfg.to_toml()?.as_bytes())?;
    info!("seed {}, output {}", ctx.cfg.seed, ctx.out.display());
    match &cli.cmd {
        Command::Gen => commands::gen(&ctx),
        Command::Fit { bundle } => commands::fit(&ctx, bundle.as_deref()),
        Command::Render { scene, cameras } => commands::render(&ctx, scene, cameras.as_deref()),
        Command::Bev { scene, head } => commands::bev(&ctx, scene, head.as_deref()),
        Command::Train => commands::train(&ctx),
        Command::Eval { bundle, prediction, head } => commands::eval(&ctx, bundle, prediction.as_deref(), head.as_deref()),
        Command::SweepHeight => commands::sweep_height(&ctx),
        Command::CheckGrads => commands::check_grads(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPLATBEV_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { code::USAGE as u8 } else { code::OK as u8 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let c = e.exit_code();
            eprintln!("error[{}] exit={c}: {e}", e.kind());
            ExitCode::from(c as u8)
        }
    }
}
