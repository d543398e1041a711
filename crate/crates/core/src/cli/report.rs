//! Merges run reports into one long-format CSV (run, epoch, metric, value).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{EpochRecord, RunReport};

pub const REPORT_METRICS: [&str; 4] = ["train_output_loss", "heldout_output_loss", "memorization_bleu", "output_length"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub run: String,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub rows: Vec<LongRow>,
    /// Run directories whose report could not be read, with the reason.
    pub failures: Vec<(PathBuf, String)>,
}

/// Mean of each tracked metric recorded at this epoch.
pub fn epoch_metrics(e: &EpochRecord) -> Vec<(&'static str, f64)> {
    let summaries = [
        &e.train_output_loss,
        &e.heldout_output_loss,
        &e.memorization_bleu,
        &e.output_length,
    ];
    REPORT_METRICS
        .iter()
        .zip(summaries)
        .filter_map(|(name, s)| s.as_ref().map(|s| (*name, s.mean)))
        .collect()
}

pub fn merge_reports(run_dirs: &[PathBuf]) -> MergeOutcome {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for dir in run_dirs {
        let report = match RunReport::load_json(&dir.join("report.json")) {
            Ok(r) => r,
            Err(e) => {
                failures.push((dir.clone(), e.to_string()));
                continue;
            }
        };
        let run = dir.display().to_string();
        for e in &report.epochs {
            for (metric, value) in epoch_metrics(e) {
                rows.push(LongRow {
                    run: run.clone(),
                    epoch: e.epoch,
                    metric: metric.to_string(),
                    value,
                });
            }
        }
    }
    MergeOutcome { rows, failures }
}

pub fn write_long_csv(path: &Path, rows: &[LongRow]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_long_csv(path: &Path) -> Result<Vec<LongRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
