pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use fairpref::bounds::InstanceFamily;

use config::{load_config, RunConfig};
use error::{Category, CliError};

#[derive(Parser)]
#[command(name = "fairpref", version, about = "Fairness-aware preference optimization experiments")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Implicit,
    IndependentReward,
}

impl From<Family> for InstanceFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Implicit => InstanceFamily::Implicit,
            Family::IndependentReward => InstanceFamily::IndependentReward,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark described by the [data] section.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train through the task sequence and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run per (beta, gamma) and write sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        beta: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        gamma: Option<Vec<f64>>,
        /// Run grid points concurrently.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check both divergence bound chains on random finite instances.
    VerifyBounds {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        family: Option<Family>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge metrics from run directories into one CSV or JSON file.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { spec, out } => {
            let cfg = load_config(&spec)?;
            let m = commands::gen_data(&cfg, &out)?;
            println!(
                "wrote {} records in {} tasks to {} (hash {})",
                m.total_records,
                m.tasks.len(),
                out.display(),
                m.content_hash
            );
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let r = commands::train(&cfg, &out)?;
            let m = &r.metrics;
            println!(
                "MFT {:.4}  MFN {:.4}  MAA {:.4}  BWT {:.4}",
                m.mft, m.mfn, m.maa, m.bwt
            );
        }
        Command::Sweep {
            config,
            beta,
            gamma,
            parallel,
            out,
        } => {
            let cfg = load_config(&config)?;
            let grid = commands::sweep_grid(&cfg, beta, gamma);
            let csv = commands::sweep(&cfg, &grid, &out, parallel || cfg.sweep.parallel)?;
            print!("{csv}");
        }
        Command::VerifyBounds {
            config,
            instances,
            n,
            seed,
            family,
            out,
        } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => RunConfig::default(),
            };
            let v = &cfg.verify;
            let s = commands::verify_bounds(
                &cfg,
                instances.unwrap_or(v.instances),
                n.unwrap_or(v.n),
                seed.unwrap_or(v.seed),
                family.map(Into::into).unwrap_or(v.family),
                &out,
            )?;
            println!(
                "{} instances, {} with preconditions met, {} violations",
                s.instances, s.preconditions_met, s.violations
            );
        }
        Command::Report { runs, out } => {
            let rows = report::report(&runs, &out)?;
            println!("merged {} runs into {}", rows.len(), out.display());
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError {
        category: Category::Usage,
        message: e.to_string(),
    })?;
    run(cli)
}
