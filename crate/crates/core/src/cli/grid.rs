//! Experiment grids: independent training cells plus a comparison table.
//!
//! Layout under the output directory:
//!
//! ```text
//! <out>/comparison.csv
//! <out>/<cell>/cell.json        config echo
//! <out>/<cell>/train.jsonl      corpus actually used (synthetic cells)
//! <out>/<cell>/eval.jsonl
//! <out>/<cell>/report.json, epochs.csv, checkpoints/
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{error, info};

use super::synth::{synth_corpus, SyntheticCorpusSpec};
use crate::corpus::{dataset_stats, load_dataset, tokenize_corpus, write_dataset, ChatExample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig};
use crate::train::{train, RunReport, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusSource {
    /// `spec.n_examples` training examples plus `heldout` evaluation
    /// examples drawn from the same generator.
    Synthetic { spec: SyntheticCorpusSpec, heldout: usize },
    Files { train: PathBuf, eval: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub name: String,
    pub corpus: CorpusSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub cells: Vec<GridCell>,
    /// Maximum number of cells trained concurrently.
    #[serde(default = "one")]
    pub parallelism: usize,
}

impl ExperimentGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for cell in &self.cells {
            let valid_name = !cell.name.is_empty()
                && cell.name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
                && cell.name != "."
                && cell.name != "..";
            if !valid_name {
                return Err(Error::Config(format!("invalid cell name `{}`", cell.name)));
            }
            if !seen.insert(cell.name.as_str()) {
                return Err(Error::Config(format!("duplicate cell name `{}`", cell.name)));
            }
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub cell: String,
    pub mode: String,
    pub kl_lambda: Option<f64>,
    pub neftune_alpha: Option<f64>,
    /// Measured instruction/output length ratio of the training set.
    pub ratio: Option<f64>,
    pub size: usize,
    pub seed: u64,
    pub heldout_loss: Option<f64>,
    pub train_loss: Option<f64>,
    pub bleu: Option<f64>,
    pub gen_len: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub row: ComparisonRow,
    pub report: Option<RunReport>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub cells: Vec<CellResult>,
}

impl GridOutcome {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.report.is_none()).count()
    }
}

fn load_examples(path: &Path) -> Result<Vec<ChatExample>> {
    Ok(load_dataset(path, None)?.examples)
}

fn run_cell(cell: &GridCell, dir: &Path) -> Result<(RunReport, Option<f64>)> {
    cell.train.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let echo = dir.join("cell.json");
    fs::write(&echo, serde_json::to_string_pretty(cell)? + "\n").map_err(|e| Error::io(&echo, e))?;

    let (train_raw, eval_raw) = match &cell.corpus {
        CorpusSource::Synthetic { spec, heldout } => {
            let mut all = synth_corpus(&SyntheticCorpusSpec {
                n_examples: spec.n_examples + heldout,
                ..spec.clone()
            })?;
            let eval = all.split_off(spec.n_examples);
            write_dataset(&dir.join("train.jsonl"), &all)?;
            write_dataset(&dir.join("eval.jsonl"), &eval)?;
            (all, eval)
        }
        CorpusSource::Files { train, eval } => {
            let eval = match eval {
                Some(p) => load_examples(p)?,
                None => Vec::new(),
            };
            (load_examples(train)?, eval)
        }
    };
    let vocab = Vocabulary::new();
    let max_len = cell.train.max_seq_len.min(cell.model.max_seq_len);
    let train_set = tokenize_corpus(&train_raw, &vocab, max_len);
    let eval_set = tokenize_corpus(&eval_raw, &vocab, max_len);
    let ratio = dataset_stats(&train_set).ok().and_then(|s| s.ratio_instr_over_out);
    let init = init_params(&cell.model)?;
    let outcome = train(&train_set, &eval_set, init, &cell.train, Some(dir))?;
    Ok((outcome.report, ratio))
}

fn row_for(cell: &GridCell, report: Option<&RunReport>, ratio: Option<f64>, status: String) -> ComparisonRow {
    let last = report.and_then(|r| r.last_epoch());
    let mean = |f: fn(&crate::train::EpochRecord) -> Option<&crate::metrics::DistributionSummary>| {
        last.and_then(f).map(|s| s.mean)
    };
    let size = match &cell.corpus {
        CorpusSource::Synthetic { spec, .. } => spec.n_examples,
        CorpusSource::Files { .. } => report.map(|r| r.train_examples).unwrap_or(0),
    };
    ComparisonRow {
        cell: cell.name.clone(),
        mode: cell.train.loss_mode.to_string(),
        kl_lambda: cell.train.use_kl.then_some(cell.train.kl_lambda),
        neftune_alpha: cell.train.use_neftune.then_some(cell.train.neftune_alpha),
        ratio,
        size,
        seed: cell.train.seed,
        heldout_loss: mean(|e| e.heldout_output_loss.as_ref()),
        train_loss: mean(|e| e.train_output_loss.as_ref()),
        bleu: mean(|e| e.memorization_bleu.as_ref()),
        gen_len: mean(|e| e.output_length.as_ref()),
        status,
    }
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_comparison(path: &Path) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Trains every cell, recording failures instead of aborting, and writes
/// `comparison.csv` with one row per cell in grid order.
pub fn run_grid(grid: &ExperimentGrid, out_dir: &Path) -> Result<GridOutcome> {
    grid.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells: Vec<CellResult> = pool.install(|| {
        grid.cells
            .par_iter()
            .map(|cell| match run_cell(cell, &out_dir.join(&cell.name)) {
                Ok((report, ratio)) => {
                    info!(cell = %cell.name, "cell finished");
                    CellResult {
                        row: row_for(cell, Some(&report), ratio, "ok".into()),
                        report: Some(report),
                    }
                }
                Err(e) => {
                    error!(cell = %cell.name, "cell failed: {e}");
                    CellResult {
                        row: row_for(cell, None, None, format!("failed: {e}")),
                        report: None,
                    }
                }
            })
            .collect()
    });
    let rows: Vec<ComparisonRow> = cells.iter().map(|c| c.row.clone()).collect();
    write_comparison(&out_dir.join("comparison.csv"), &rows)?;
    Ok(GridOutcome { cells })
}
