use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Result;
use crate::federation::Mode;
use crate::harness::check::run_checks;
use crate::harness::config::ExperimentConfig;
use crate::harness::data::export_dataset;
use crate::harness::{dataset_for, run_experiment, write_outputs};
use crate::parallel::Exec;

#[derive(Debug, Parser)]
#[command(name = "hyperfcl", about = "Federated continual learning simulator with a task-conditioned hypernetwork")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write metrics.csv, summary.json and plots.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        rounds_per_task: Option<usize>,
        /// Sets beta, beta1 and beta2 together.
        #[arg(long)]
        beta: Option<f64>,
        /// Train clients one after another instead of on the thread pool.
        #[arg(long)]
        sequential: bool,
    },
    /// Write the Shapes-15 dataset as PGM images plus a manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient and oracle self-tests.
    Check,
}

fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Run { config, seed, out, mode, rounds_per_task, beta, sequential } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(r) = rounds_per_task {
                cfg.rounds_per_task = r;
            }
            if let Some(b) = beta {
                cfg.beta = b;
                cfg.beta1 = b;
                cfg.beta2 = b;
            }
            cfg.validate()?;
            let exec = if sequential { Exec::Sequential } else { Exec::Parallel };
            let (output, records) = run_experiment(&cfg, exec)?;
            write_outputs(&cfg, &output, &records, &cfg.out_dir)?;
            for (c, r) in records.iter().rev().take(cfg.num_clients).rev().enumerate() {
                println!("client {c}: final mean dice {:.4}", r.mean_dice);
            }
            println!("wrote {}", cfg.out_dir.display());
            Ok(0)
        }
        Command::GenData { config, out } => {
            let cfg = load(&config)?;
            export_dataset(&dataset_for(&cfg)?, cfg.seed, &out)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Check => {
            let results = run_checks()?;
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            Ok(i32::from(failed > 0))
        }
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
