use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mscloudcam::gradsuite::Scope;
use mscloudcam_cli::{
    cmd_eval, cmd_gradcheck, cmd_infer, cmd_summary, cmd_train, CliResult, Command, EvalArgs,
    GradcheckArgs, InferArgs, RunConfig, TrainArgs,
};

/// Multispectral cloud and shadow segmentation.
#[derive(Parser)]
#[command(name = "mscloudcam", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value config file (`section.key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `model.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must not exist yet.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores; 1 for bit-reproducible runs).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and checkpoint after every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Metrics table for a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Predict the ground truth itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Class map and colour image for one scene.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene as a `.mst` raster.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// all, numerics, backbone, context, fusion, decoder or model.
        #[arg(long, default_value = "all")]
        scope: String,
        /// Include a deliberately broken op that must be reported.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Parameter and FLOP report.
    Summary {
        #[command(flatten)]
        common: Common,
        /// Square input sides for the FLOP sweep.
        #[arg(long, value_delimiter = ',', default_value = "256,512")]
        sizes: Vec<usize>,
    },
}

fn run_config(command: Command, c: &Common) -> RunConfig {
    RunConfig {
        command,
        config: c.config.clone(),
        seed: c.seed,
        threads: c.threads,
        out: c.out.clone(),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let (run, cmd) = match &cli.command {
        Cmd::Train { common, .. } => (run_config(Command::Train, common), &cli.command),
        Cmd::Eval { common, .. } => (run_config(Command::Eval, common), &cli.command),
        Cmd::Infer { common, .. } => (run_config(Command::Infer, common), &cli.command),
        Cmd::Gradcheck { common, .. } => (run_config(Command::Gradcheck, common), &cli.command),
        Cmd::Summary { common, .. } => (run_config(Command::Summary, common), &cli.command),
    };
    if let Some(n) = run.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| mscloudcam::Error::Config(format!("--threads: {e}")))?;
    }
    let mut stdout = std::io::stdout().lock();
    match cmd {
        Cmd::Train { resume, .. } => cmd_train(&run, &TrainArgs { resume: *resume }, &mut stdout),
        Cmd::Eval {
            checkpoint,
            split,
            oracle,
            ..
        } => cmd_eval(
            &run,
            &EvalArgs {
                checkpoint: checkpoint.clone(),
                split: split.clone(),
                oracle: *oracle,
            },
            &mut stdout,
        ),
        Cmd::Infer {
            checkpoint, input, ..
        } => cmd_infer(
            &run,
            &InferArgs {
                checkpoint: checkpoint.clone(),
                input: input.clone(),
            },
            &mut stdout,
        ),
        Cmd::Gradcheck {
            scope,
            inject_fault,
            ..
        } => {
            let scope: Scope = scope.parse()?;
            cmd_gradcheck(
                &GradcheckArgs {
                    scope,
                    inject_fault: *inject_fault,
                },
                &mut stdout,
            )
        }
        Cmd::Summary { sizes, .. } => cmd_summary(&run, sizes, &mut stdout),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
