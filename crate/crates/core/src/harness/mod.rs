//! Everything around an experiment: data, configuration, metrics, plots and
//! the command line.

pub mod check;
pub mod cli;
pub mod config;
pub mod data;
pub mod metrics;
pub mod plot;

use std::path::Path;

use crate::error::Result;
use crate::federation::{run, RunOutput};
use crate::hyper::Checkpoint;
use crate::parallel::Exec;
use config::ExperimentConfig;
use data::{generate_dataset, Dataset};
use metrics::{records_from_logs, run_id, write_metrics, MetricsRecord};

/// Image side length of Shapes-15.
pub const IMAGE_SIZE: usize = 32;

pub fn dataset_for(config: &ExperimentConfig) -> Result<Dataset> {
    generate_dataset(config.num_clients, config.images_per_client, IMAGE_SIZE, config.seed)
}

/// Validate, generate data and run one experiment in memory.
pub fn run_experiment(config: &ExperimentConfig, exec: Exec) -> Result<(RunOutput, Vec<MetricsRecord>)> {
    config.validate()?;
    let dataset = dataset_for(config)?;
    run_on(config, &dataset, exec)
}

/// Run on an existing dataset, e.g. to compare modes on identical data.
pub fn run_on(config: &ExperimentConfig, dataset: &Dataset, exec: Exec) -> Result<(RunOutput, Vec<MetricsRecord>)> {
    config.validate()?;
    let setup = crate::federation::RunSetup { exec, ..config.setup() };
    let output = run(&config.federation(), dataset, &setup)?;
    let records = records_from_logs(&run_id(config.mode, config.seed), config.mode, &output.logs);
    Ok((output, records))
}

/// Write metrics, summary, plots and, for hypernetwork modes, the final
/// hypernetwork checkpoint.
pub fn write_outputs(config: &ExperimentConfig, output: &RunOutput, records: &[MetricsRecord], dir: &Path) -> Result<()> {
    write_metrics(records, config, dir)?;
    if !records.is_empty() {
        plot::emit_plots(records, dir)?;
    }
    if let Some((hyper, identities)) = &output.hyper {
        Checkpoint::capture(&config.setup().arch, hyper, identities).save(&dir.join("hypernetwork.json"))?;
    }
    Ok(())
}
