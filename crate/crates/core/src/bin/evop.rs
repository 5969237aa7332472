use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use evop_core::harness::{self, ExperimentConfig, HarnessError, Report};

#[derive(Parser)]
#[command(name = "evop", version, about = "Eventually-optimal prediction under unbounded feedback delays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write per-run CSVs, summary.csv and report.txt.
    Run(Common),
    /// Evaluate the convergence-time bounds of the config's bound section.
    Bound(Common),
    /// Monte Carlo check of the martingale tail bound.
    Verify(Common),
    /// Check the incremental predictor against the from-scratch one.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    /// Write every step instead of change points and block ends.
    #[arg(long)]
    per_step: bool,
    #[arg(long)]
    horizon: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            config.output_dir = Some(out.clone());
        }
        if let Some(n) = self.seeds {
            config.seeds.count = n;
        }
        if let Some(s) = self.master_seed {
            config.seeds.master_seed = s;
        }
        if let Some(h) = self.horizon {
            config.horizon = Some(h);
        }
        config.per_step |= self.per_step;
        Ok(config)
    }
}

fn dispatch(cli: &Cli) -> Result<Report, HarnessError> {
    match &cli.command {
        Command::Run(c) => harness::run(&c.load()?),
        Command::Bound(c) => harness::bound(&c.load()?),
        Command::Verify(c) => harness::verify(&c.load()?),
        Command::Compare(c) => harness::compare(&c.load()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(report) => {
            print!("{}", report.render());
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
