use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rhsim_cli::config::{ProfileArg, ScenarioConfig};
use rhsim_cli::{run, Command};

/// Rowhammer attack and defense co-simulation.
#[derive(Parser, Debug)]
#[command(name = "rhsim", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML scenario file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report directory; overrides `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Binary for `opflip-scan`.
    #[arg(long)]
    binary: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    echo_config: bool,
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
    let mut cfg = match &cli.config {
        Some(p) => match ScenarioConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => ScenarioConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.output = o;
    }
    if let Some(p) = cli.profile {
        cfg.profile = p.into();
    }
    if let Some(b) = cli.binary {
        cfg.opflip.binary = Some(b);
    }
    if cli.echo_config {
        print!("{}", cfg.to_toml());
        return ExitCode::SUCCESS;
    }
    let outcome = match run(cli.command, &cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Err(e) = outcome.bundle.write(&cfg.output) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    for name in outcome.bundle.names() {
        println!("{}", cfg.output.join(name).display());
    }
    ExitCode::from(outcome.status.exit_code() as u8)
}
