use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::masking::MaskMode;
use crate::metrics::DistributionSummary;
use crate::model::ModelConfig;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Metrics recorded at the end of one epoch. Evaluation summaries are `None`
/// on epochs skipped by `eval_every`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: u64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Mean of the per-step training objective over the epoch.
    pub train_objective: f64,
    pub loss_mode: MaskMode,
    pub use_kl: bool,
    pub kl_lambda: f64,
    pub use_neftune: bool,
    pub param_drift_l2: f64,
    pub train_output_loss: Option<DistributionSummary>,
    pub heldout_output_loss: Option<DistributionSummary>,
    pub memorization_bleu: Option<DistributionSummary>,
    pub output_length: Option<DistributionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub vocab_size: usize,
    pub param_count: usize,
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub total_steps: u64,
    pub epochs: Vec<EpochRecord>,
}

/// Per-epoch CSV columns; distribution summaries contribute their mean.
pub const EPOCH_CSV_HEADER: [&str; 15] = [
    "epoch",
    "step",
    "lr",
    "train_objective",
    "loss_mode",
    "use_kl",
    "kl_lambda",
    "use_neftune",
    "param_drift_l2",
    "train_output_loss",
    "heldout_output_loss",
    "memorization_bleu",
    "output_length",
    "heldout_output_loss_std",
    "train_output_loss_std",
];

fn mean(s: &Option<DistributionSummary>) -> String {
    s.as_ref().map(|s| s.mean.to_string()).unwrap_or_default()
}

fn std(s: &Option<DistributionSummary>) -> String {
    s.as_ref().map(|s| s.std.to_string()).unwrap_or_default()
}

impl RunReport {
    pub fn last_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: RunReport = serde_json::from_str(text)?;
        if report.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Report(format!("unsupported report version {}", report.format_version)));
        }
        Ok(report)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(EPOCH_CSV_HEADER)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.step.to_string(),
                e.lr.to_string(),
                e.train_objective.to_string(),
                e.loss_mode.to_string(),
                e.use_kl.to_string(),
                e.kl_lambda.to_string(),
                e.use_neftune.to_string(),
                e.param_drift_l2.to_string(),
                mean(&e.train_output_loss),
                mean(&e.heldout_output_loss),
                mean(&e.memorization_bleu),
                mean(&e.output_length),
                std(&e.heldout_output_loss),
                std(&e.train_output_loss),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
