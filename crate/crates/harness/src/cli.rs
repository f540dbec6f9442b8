//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 invalid
//! configuration, 3 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::experiment::ExperimentConfig;
use crate::runner::{
    cmd_analyze, cmd_eval, cmd_gen_data, cmd_pack, cmd_route_label, cmd_route_train, cmd_screen,
    cmd_train, AnalyzeKind, EvalMode, RunContext, TrainMode,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser)]
#[command(
    name = "vlsched",
    about = "Sparse vision-language layer scheduling: train, screen, route, and analyze toy models",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for artifacts (created if missing).
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dense,
    Fixed,
    Universal,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalyzeArg {
    Cka,
    Shares,
    Drop,
    Flops,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic datasets of this configuration to disk.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model: dense baseline, fixed maximal schedule, or the full
    /// universal recipe (pretrain, screen, universal fine-tune, label,
    /// router).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "fixed")]
        mode: ModeArg,
        /// Resume universal training from this checkpoint instead of
        /// pretraining.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Use this viability sidecar instead of screening.
        #[arg(long)]
        viable: Option<PathBuf>,
    },
    /// Screen enumerated configurations of a trained checkpoint.
    Screen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate offline pseudo-labels for the router.
    RouteLabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        viable: PathBuf,
    },
    /// Train the routing head on generated pseudo-labels.
    RouteTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        viable: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Evaluate a checkpoint: fixed configuration, routed, or oracle.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fixed configuration id, or "max" for the maximal configuration.
        #[arg(long, conflicts_with_all = ["routed", "oracle"])]
        config_id: Option<String>,
        #[arg(long, conflicts_with = "oracle")]
        routed: bool,
        #[arg(long)]
        oracle: bool,
    },
    /// Run one of the analyses over a checkpoint.
    Analyze {
        #[arg(value_enum)]
        what: AnalyzeArg,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Pack a token grid (or a seeded demo grid) by the configured
    /// reduction factor.
    Pack {
        #[command(flatten)]
        common: Common,
        /// Input grid dump; a demo grid is generated when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Project folded channels back down with an averaging projector.
        #[arg(long)]
        average_projector: bool,
    },
}

fn context(common: &Common) -> Result<RunContext, i32> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    RunContext::create(cfg, common.out.clone()).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_RUNTIME
    })
}

fn run_stage(result: vlsched_core::Result<()>) -> i32 {
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Parses and executes one invocation, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match cli.cmd {
        Cmd::GenData { common } => {
            let ctx = match context(&common) {
                Ok(c) => c,
                Err(code) => return code,
            };
            run_stage(cmd_gen_data(&ctx))
        }
        Cmd::Train { common, mode, resume, viable } => {
            let ctx = match context(&common) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let mode = match mode {
                ModeArg::Dense => TrainMode::Dense,
                ModeArg::Fixed => TrainMode::Fixed,
                ModeArg::Universal => TrainMode::Universal,
            };
            run_stage(cmd_train(&ctx, mode, resume.as_deref(), viable.as_deref()))
        }
        Cmd::Screen { common, checkpoint } => {
            let ctx = match context(&common) {
                Ok(c) => c,
                Err(code) => return code,
            };
            run_stage(cmd_screen(&ctx, &checkpoint))
        }
        Cmd::RouteLabel { common, checkpoint, viable } => {
            let ctx = match context(&common) {
                Ok(c) => c,
                Err(code) => return code,
            };
            run_stage(cmd_route_label(&ctx, &checkpoint, &viable))
        }
        Cmd::RouteTrain { common, checkpoint, viable, labels } => {
            let ctx = match context(&common) {
                Ok(c) => c,
                Err(code) => return code,
            };
            run_stage(cmd_route_train(&ctx, &checkpoint, &viable, &labels))
        }
        Cmd::Eval { common, checkpoint, config_id, routed, oracle } => {
            let ctx = match context(&common) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let mode = if routed {
                EvalMode::Routed
            } else if oracle {
                EvalMode::Oracle
            } else {
                match config_id.as_deref() {
                    None | Some("max") => EvalMode::Fixed(None),
                    Some(text) => match text.parse::<usize>() {
                        Ok(id) => EvalMode::Fixed(Some(id)),
                        Err(_) => {
                            eprintln!(
                                "error: --config-id must be a configuration id or \"max\", got {text:?}"
                            );
                            return EXIT_USAGE;
                        }
                    },
                }
            };
            run_stage(cmd_eval(&ctx, &checkpoint, mode))
        }
        Cmd::Analyze { what, common, checkpoint } => {
            let ctx = match context(&common) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let what = match what {
                AnalyzeArg::Cka => AnalyzeKind::Cka,
                AnalyzeArg::Shares => AnalyzeKind::Shares,
                AnalyzeArg::Drop => AnalyzeKind::Drop,
                AnalyzeArg::Flops => AnalyzeKind::Flops,
            };
            run_stage(cmd_analyze(&ctx, &checkpoint, what))
        }
        Cmd::Pack { common, input, average_projector } => {
            let ctx = match context(&common) {
                Ok(c) => c,
                Err(code) => return code,
            };
            run_stage(cmd_pack(&ctx, input.as_deref(), average_projector))
        }
    }
}
