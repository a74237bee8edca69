use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maglev_cli::{configure, run, Command, Context, USAGE_EXIT};

#[derive(Parser)]
#[command(name = "maglev", version, about = "Maglev levitation control studies")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// Configuration file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set ocp.q_s=300`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Directory for result files.
    #[arg(long, default_value = "results", global = true)]
    out: PathBuf,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
    /// Seed for sensor noise and guideway offsets.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// One closed-loop run.
    Simulate,
    /// Region-of-attraction grid.
    Roa,
    /// First optimal input against horizon length.
    HorizonSweep,
    /// Closed-loop runs over a weight grid.
    TuneSweep,
    /// Closed-loop runs over train velocity.
    Robustness,
    /// Closed-loop cost of fast solvers against a converged reference.
    Suboptimality,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::Roa => Command::Roa,
            Cmd::HorizonSweep => Command::HorizonSweep,
            Cmd::TuneSweep => Command::TuneSweep,
            Cmd::Robustness => Command::Robustness,
            Cmd::Suboptimality => Command::Suboptimality,
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE_EXIT as u8 } else { 0 });
        }
    };
    let config = match configure(args.config.as_deref(), &args.set, args.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(USAGE_EXIT as u8);
        }
    };
    let ctx = Context {
        out: args.out,
        jobs: args.jobs,
    };
    match run(args.command.into(), &config, &ctx) {
        Ok(outcome) => {
            // a closed stdout (e.g. piped into `head`) is not an error
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}", outcome.summary);
            for f in &outcome.files {
                let _ = writeln!(out, "wrote {}", f.display());
            }
            ExitCode::from(outcome.exit.code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(USAGE_EXIT as u8)
        }
    }
}
