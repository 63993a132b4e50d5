use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use selftof::eval::Protocol;
use selftof_cli::{exit_code, Config, Predictor, EXIT_CONFIG};

#[derive(Parser)]
#[command(
    name = "selftof",
    version,
    about = "Depth enhancement of multizone ToF readings with RGB video"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes with zone readings and split files.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train DepthNet and PoseNet on the train split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint or a baseline on the test split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, required_if_eq("baseline", "none"))]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "none")]
        baseline: Baseline,
        /// Fraction of zones dropped before inference.
        #[arg(long)]
        sr: Option<f64>,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write predictions and error maps as PNG files.
        #[arg(long)]
        dump: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Nn,
    Gf,
    None,
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: selftof::Error| e.to_string())
}

fn load(path: Option<&PathBuf>) -> selftof::Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::desk()),
    }
}

fn run(cli: Cli) -> selftof::Result<()> {
    match cli.command {
        Command::Simulate { config, out } => selftof_cli::simulate(&load(config.as_ref())?, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => selftof_cli::train(&load(config.as_ref())?, &data, &out, resume).map(|_| ()),
        Command::Eval {
            config,
            data,
            out,
            checkpoint,
            baseline,
            sr,
            protocol,
            seed,
            dump,
        } => {
            let mut cfg = load(config.as_ref())?;
            if let Some(sr) = sr {
                cfg.sparsity_ratio = sr;
            }
            if let Some(p) = protocol {
                cfg.protocol = p;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let predictor = match baseline {
                Baseline::Nn => Predictor::NearestNeighbour,
                Baseline::Gf => Predictor::GuidedFilter,
                Baseline::None => Predictor::Checkpoint(checkpoint.expect("clap requires a checkpoint")),
            };
            let outcome = selftof_cli::eval(&cfg, &data, &predictor, &out, dump)?;
            println!("{}", outcome.report);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
