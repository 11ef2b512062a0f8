use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use fedloom::Error;

mod run;
mod sim;

#[derive(Parser)]
#[command(
    name = "fedloom",
    version,
    about = "Federated learning server, worker and simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Sync,
    Async,
}

#[derive(Subcommand)]
enum Command {
    /// Recruit the configured workers and run the training loop.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `server.mode`.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Directory for rounds.csv and consumed.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Host worker models until terminated.
    Work {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run scenarios on the virtual clock.
    Simulate {
        /// Built-in name or path to a scenario file; repeat to compare.
        #[arg(long, required_unless_present = "list")]
        scenario: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "fedloom-out")]
        out: PathBuf,
        /// Overrides each scenario's target accuracy.
        #[arg(long)]
        target: Option<f64>,
        /// Overrides each scenario's mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Print the built-in scenario names and exit.
        #[arg(long, exclusive = true)]
        list: bool,
    },
    /// Print (elapsed, accuracy) pairs and time to target from a rounds CSV.
    Report {
        records: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        target: f64,
    },
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NOT_READY: u8 = 3;
pub const EXIT_PORT_IN_USE: u8 = 4;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Parse(_) | Error::InvalidArgument(_) | Error::Format { .. } => {
                EXIT_CONFIG
            }
            Error::Transport(io) if io.kind() == std::io::ErrorKind::AddrInUse => EXIT_PORT_IN_USE,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

fn termination_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        if let Err(e) = signal_hook::flag::register(sig, flag.clone()) {
            log::warn!("cannot watch signal {sig}: {e}");
        }
    }
    flag
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDLOOM_LOG", "info")).init();
    let outcome = match cli.command {
        Command::Serve { config, mode, out } => run::serve(&config, mode, &out, termination_flag()),
        Command::Work { config } => run::work(&config, termination_flag()),
        Command::Simulate {
            scenario,
            seeds,
            out,
            target,
            mode,
            list,
        } => {
            if list {
                sim::list();
                Ok(())
            } else {
                sim::simulate(&scenario, &seeds, &out, target, mode)
            }
        }
        Command::Report { records, target } => sim::report(&records, target),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("fedloom: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
