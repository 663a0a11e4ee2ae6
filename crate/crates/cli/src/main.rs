use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hawkes_causal_cli::{
    cmd_attribute, cmd_eval, cmd_report, cmd_simulate, cmd_train, configure_threads, CliError, RunConfig,
};

/// Granger causality discovery on multi-type event sequences.
#[derive(Parser)]
#[command(name = "hawkes-causal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and its ground-truth sidecar.
    Simulate(Args),
    /// Fit the configured model.
    Train(Args),
    /// Score type-level causality and next-type accuracy.
    Eval(Args),
    /// Export instance-level attributions and the synergy analysis.
    Attribute(Args),
    /// Combine evaluations into one table.
    Report(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Run directory, overriding `paths.run_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cmd: Command) -> Result<(), CliError> {
    configure_threads()?;
    let (Command::Simulate(a) | Command::Train(a) | Command::Eval(a) | Command::Attribute(a) | Command::Report(a)) =
        &cmd;
    let cfg = RunConfig::load(&a.config)?.with_overrides(a.seed, a.out.clone());
    match cmd {
        Command::Simulate(_) => cmd_simulate(&cfg).map(drop),
        Command::Train(_) => cmd_train(&cfg).map(drop),
        Command::Eval(_) => cmd_eval(&cfg).map(drop),
        Command::Attribute(_) => cmd_attribute(&cfg).map(drop),
        Command::Report(_) => cmd_report(&cfg).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
