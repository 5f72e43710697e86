use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::federation::{Mode, RoundLog};
use crate::harness::config::ExperimentConfig;

/// One row of `metrics.csv`: a client's state after a global round.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub mode: Mode,
    pub round: usize,
    pub client: usize,
    pub task: Option<u32>,
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    /// Last server objective value of this client's upload.
    pub server_loss: Option<f64>,
    pub w_s: Option<f64>,
}

pub fn run_id(mode: Mode, seed: u64) -> String {
    format!("{mode}-seed{seed}")
}

/// Flatten round logs into records, ordered by (round, client).
pub fn records_from_logs(run_id: &str, mode: Mode, logs: &[RoundLog]) -> Vec<MetricsRecord> {
    let mut out = Vec::new();
    for log in logs {
        for c in &log.clients {
            let upload = log.server.as_ref().and_then(|s| s.for_client(c.client_id));
            out.push(MetricsRecord {
                run_id: run_id.to_string(),
                mode,
                round: log.global_round,
                client: c.client_id,
                task: c.task,
                dice: c.dice.clone(),
                mean_dice: c.mean_dice,
                server_loss: upload.and_then(|u| u.objective.last().copied()),
                w_s: upload.and_then(|u| u.w_s),
            });
        }
    }
    out
}

pub fn csv_header(channels: usize) -> Vec<String> {
    let mut h: Vec<String> = ["run_id", "mode", "round", "client", "task"].map(String::from).to_vec();
    h.extend((1..=channels).map(|c| format!("dice_{c}")));
    h.extend(["mean_dice", "server_loss", "w_s"].map(String::from));
    h
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-client summary tables derived from the records.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub per_client_final_mean_dice: Vec<f64>,
    pub per_client_per_task_final_dice: Vec<Vec<f64>>,
    /// Final over peak Dice of the shared initial tasks, per client.
    pub peak_vs_final_retention: Vec<f64>,
}

/// Mean Dice over `tasks` (1-based channel ids) of one record.
pub fn task_mean(record: &MetricsRecord, tasks: &[u32]) -> f64 {
    if tasks.is_empty() {
        return 0.0;
    }
    tasks.iter().map(|&t| record.dice[t as usize - 1]).sum::<f64>() / tasks.len() as f64
}

/// Final over peak of the mean Dice on `tasks`, 0 when the peak is 0.
pub fn retention(records: &[&MetricsRecord], tasks: &[u32]) -> f64 {
    let series: Vec<f64> = records.iter().map(|r| task_mean(r, tasks)).collect();
    let peak = series.iter().copied().fold(0.0, f64::max);
    match series.last() {
        Some(&last) if peak > 0.0 => last / peak,
        _ => 0.0,
    }
}

pub fn summarize(records: &[MetricsRecord], config: &ExperimentConfig) -> Summary {
    let clients = records.iter().map(|r| r.client + 1).max().unwrap_or(0);
    let mut summary = Summary {
        config: config.clone(),
        seed: config.seed,
        per_client_final_mean_dice: Vec::with_capacity(clients),
        per_client_per_task_final_dice: Vec::with_capacity(clients),
        peak_vs_final_retention: Vec::with_capacity(clients),
    };
    for c in 0..clients {
        let rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.client == c).collect();
        let Some(last) = rows.last() else {
            continue;
        };
        summary.per_client_final_mean_dice.push(last.mean_dice);
        summary.per_client_per_task_final_dice.push(last.dice.clone());
        summary.peak_vs_final_retention.push(retention(&rows, &config.shared_initial));
    }
    summary
}

/// Write `metrics.csv` and `summary.json` into `dir`.
pub fn write_metrics(records: &[MetricsRecord], config: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let channels = records.first().map_or(15, |r| r.dice.len());
    let csv_path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(csv_header(channels))?;
    for r in records {
        let mut row = vec![
            r.run_id.clone(),
            r.mode.to_string(),
            r.round.to_string(),
            r.client.to_string(),
            opt(r.task),
        ];
        // Display on f64 prints the shortest decimal that round-trips
        row.extend(r.dice.iter().map(f64::to_string));
        row.extend([r.mean_dice.to_string(), opt(r.server_loss), opt(r.w_s)]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let json_path = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summarize(records, config))?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}
