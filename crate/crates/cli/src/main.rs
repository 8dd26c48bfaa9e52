use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trajforge::commands::{self, GenerateOptions, PartialFailure, TrainOptions};
use trajforge::RunConfig;
use trajforge_generate::ConstraintParams;
use trajforge_lm::{PermuteMode, TrainMode};

#[derive(Parser)]
#[command(name = "trajforge", version, about = "Train and sample single-day mobility trajectory models")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker cap (work is currently single-threaded)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    LoraOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum PermuteArg {
    PerEpoch,
    Once,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// GPS CSV to staypoint trajectories
    Ingest { csv: PathBuf, out_dir: PathBuf },
    /// Fit a model to a trajectory file
    Train {
        trajectories: PathBuf,
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        permute: Option<PermuteArg>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from an existing checkpoint
        #[arg(long)]
        init: Option<PathBuf>,
        /// Loss history path [default: <checkpoint stem>.loss.csv]
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Sample trajectories, unconstrained (-n) or one per constraint line
    Generate {
        checkpoint: PathBuf,
        out: PathBuf,
        #[arg(short = 'n', long = "count")]
        n: Option<usize>,
        #[arg(long)]
        constraints: Option<PathBuf>,
        /// Forcibly insert constraints into these trajectories instead
        #[arg(long = "fi")]
        fi: Option<PathBuf>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        max_retries: Option<usize>,
        /// Manifest path [default: <out stem>.manifest.json]
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Realism metrics of generated against real trajectories
    Evaluate {
        real: PathBuf,
        generated: PathBuf,
        report: PathBuf,
        /// Adds the Top-K transition metric over these constraint locations
        #[arg(long)]
        constraints: Option<PathBuf>,
        /// Append one row to this CSV table
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Draw constraint sets from real trajectories
    MakeConstraints {
        trajectories: PathBuf,
        out: PathBuf,
        #[arg(long)]
        n_min: Option<usize>,
        #[arg(long)]
        n_max: Option<usize>,
        /// Window half-width in slots
        #[arg(long)]
        window: Option<u32>,
        #[arg(long)]
        fraction: Option<f64>,
        /// Check every set against its source trajectory
        #[arg(long)]
        verify: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::MakeConstraints { .. } => "make-constraints",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let g = &cli.global;
    let cfg = RunConfig::load(g.config.as_deref(), g.seed)?;
    if g.verbose {
        if let Some(t) = g.threads {
            eprintln!("--threads {t}: running single-threaded");
        }
    }
    match cli.command {
        Command::Ingest { csv, out_dir } => commands::ingest(&csv, &out_dir, &cfg, g.verbose),
        Command::Train { trajectories, checkpoint, mode, permute, epochs, init, loss_csv } => {
            let opts = TrainOptions {
                mode: mode.map(|m| match m {
                    ModeArg::Full => TrainMode::Full,
                    ModeArg::LoraOnly => TrainMode::LoraOnly,
                }),
                permute: permute.map(|p| match p {
                    PermuteArg::PerEpoch => PermuteMode::PerEpoch,
                    PermuteArg::Once => PermuteMode::Once,
                    PermuteArg::Off => PermuteMode::Off,
                }),
                epochs,
                init,
                loss_csv,
            };
            commands::train(&trajectories, &checkpoint, &cfg, &opts, g.verbose)
        }
        Command::Generate { checkpoint, out, n, constraints, fi, temperature, max_retries, manifest } => {
            let opts = GenerateOptions { n, constraints, fi_baseline: fi, temperature, max_retries, manifest };
            commands::generate(&checkpoint, &out, &cfg, &opts)
        }
        Command::Evaluate { real, generated, report, constraints, csv } => {
            let r = commands::evaluate_cmd(&real, &generated, &report, constraints.as_deref(), csv.as_deref(), &cfg)?;
            Ok(format!("transition_frob {:.4}", r.transition_frob))
        }
        Command::MakeConstraints { trajectories, out, n_min, n_max, window, fraction, verify } => {
            let d = &cfg.constraints;
            let params = ConstraintParams {
                n_min: n_min.unwrap_or(d.n_min),
                n_max: n_max.unwrap_or(d.n_max),
                window: window.unwrap_or(d.window),
                fraction: fraction.unwrap_or(d.fraction),
            };
            commands::make_constraints_cmd(&trajectories, &out, &params, verify, &cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(msg) => {
            eprintln!("{name}: {msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let report = serde_json::json!({ "command": name, "error": chain.join(": "), "causes": chain });
            eprintln!("{report}");
            if e.downcast_ref::<PartialFailure>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
