use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pfmcmc::app::{self, CheckOptions};
use pfmcmc::config::EngineConfig;
use pfmcmc::executor::FaultInjection;
use pfmcmc::model::ModelRegistry;

/// Particle-filter MCMC engine.
#[derive(Parser, Debug)]
#[command(name = "pfmcmc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic observations at the configured initial parameters.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Write the CSV here instead of the configured `data` path.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the chain and write chain, diagnostics and summary CSVs.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// Run the self-contained verification suite.
    Check {
        #[arg(long)]
        seed: Option<u64>,
        /// Worker counts compared by the invariance check.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        workers: Vec<usize>,
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Fault {
    /// Mix the worker count into the resampling seed.
    DecoupledResampleSeed,
}

impl From<Fault> for FaultInjection {
    fn from(f: Fault) -> Self {
        match f {
            Fault::DecoupledResampleSeed => FaultInjection::DecoupledResampleSeed,
        }
    }
}

fn load(common: &Common) -> Result<EngineConfig> {
    let mut config = EngineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let registry = ModelRegistry::with_builtin();
    match cli.command {
        Command::Synth { common, data } => {
            let mut config = load(&common)?;
            if data.is_some() {
                config.data = data;
            }
            let path = app::synth(&config, &registry).context("synthesis failed")?;
            println!("wrote {}", path.display());
        }
        Command::Run {
            common,
            workers,
            output,
            inject_fault,
        } => {
            let mut config = load(&common)?;
            if let Some(w) = workers {
                config.workers = w;
            }
            if let Some(dir) = output {
                config.output = dir;
            }
            config.validate()?;
            let s = app::run(&config, &registry, inject_fault.map(Into::into)).context("run failed")?;
            let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
            println!(
                "{} samples, acceptance rate {}, mean efficiency {}, degenerate samples {}",
                s.samples,
                fmt(s.acceptance_rate),
                fmt(s.mean_efficiency),
                s.degenerate_samples
            );
            println!(
                "mean move fraction {}, mean copy fraction {}",
                fmt(s.mean_move_fraction),
                fmt(s.mean_copy_fraction)
            );
            println!("results in {}", s.output.display());
        }
        Command::Check {
            seed,
            workers,
            inject_fault,
        } => {
            let mut options = CheckOptions {
                fault: inject_fault.map(Into::into),
                worker_counts: workers,
                ..CheckOptions::default()
            };
            if let Some(seed) = seed {
                options.seed = seed;
            }
            anyhow::ensure!(!options.worker_counts.is_empty(), "--workers needs at least one count");
            let outcomes = app::check(&options)?;
            let mut ok = true;
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                ok &= o.passed;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
