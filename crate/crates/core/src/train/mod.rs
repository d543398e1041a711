//! Fine-tuning loop: AdamW with linear warmup/decay, gradient accumulation,
//! IT or IM masking, optional KL penalty towards the initial weights and
//! optional NEFTune embedding noise.

mod objective;
mod optim;
mod report;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::corpus::TokenizedExample;
use crate::error::{Error, Result};
use crate::masking::{build_loss_mask, MaskMode};
use crate::metrics::{loss_distribution, memorization_bleu, output_length_stats, per_example_output_loss, DistributionSummary};
use crate::model::{save_checkpoint, EmbeddingNoise, GradientTape, ModelParams};

pub use objective::{example_objective, kl_row, training_loss, ExampleObjective, LossBreakdown, ObjectiveConfig, ReferenceModel};
pub use optim::{adamw_step, lr_at, warmup_steps, AdamWConfig, OptimizerState};
pub use report::{EpochRecord, RunReport, EPOCH_CSV_HEADER, REPORT_FORMAT_VERSION};

/// Mean completion-only NLL of each example, independent of the training
/// objective.
pub use crate::metrics::per_example_output_loss as evaluate_output_loss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_mode: MaskMode,
    pub use_kl: bool,
    pub kl_lambda: f64,
    pub use_neftune: bool,
    pub neftune_alpha: f64,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Evaluate every `eval_every` epochs; 0 evaluates after the last epoch only.
    pub eval_every: usize,
    /// Whether evaluation includes greedy decoding (BLEU and output length).
    pub eval_generation: bool,
    pub gen_max_new: usize,
    pub hist_bins: usize,
    pub bleu_smoothing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: MaskMode::It,
            use_kl: false,
            kl_lambda: 0.0,
            use_neftune: false,
            neftune_alpha: 5.0,
            lr: 2e-5,
            betas: (0.9, 0.98),
            eps: 1e-6,
            weight_decay: 0.0,
            warmup_fraction: 0.03,
            epochs: 2,
            batch_size: 1,
            grad_accum: 128,
            max_seq_len: 256,
            seed: 0,
            eval_every: 0,
            eval_generation: true,
            gen_max_new: 64,
            hist_bins: 20,
            bleu_smoothing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if !(self.kl_lambda >= 0.0 && self.kl_lambda.is_finite()) {
            return bad("kl_lambda must be finite and non-negative");
        }
        if !(self.neftune_alpha >= 0.0 && self.neftune_alpha.is_finite()) {
            return bad("neftune_alpha must be finite and non-negative");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.max_seq_len < 2 || self.hist_bins == 0 {
            return bad("batch_size, grad_accum and hist_bins must be at least 1, max_seq_len at least 2");
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    fn kl_lambda(&self) -> Option<f64> {
        self.use_kl.then_some(self.kl_lambda)
    }

    fn is_eval_epoch(&self, epoch: usize) -> bool {
        epoch == self.epochs || (self.eval_every > 0 && epoch.is_multiple_of(self.eval_every))
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummaries {
    pub train_output_loss: Option<DistributionSummary>,
    pub heldout_output_loss: Option<DistributionSummary>,
    pub memorization_bleu: Option<DistributionSummary>,
    pub output_length: Option<DistributionSummary>,
}

fn loss_summary(params: &ModelParams, set: &[TokenizedExample], bins: usize) -> Result<Option<DistributionSummary>> {
    let losses: Vec<f64> = per_example_output_loss(params, set)?.into_iter().map(|l| l.loss).collect();
    if losses.is_empty() {
        return Ok(None);
    }
    loss_distribution(&losses, bins).map(Some)
}

/// The per-epoch diagnostics: completion loss on both sets and, when
/// enabled, memorization BLEU on the train set and greedy output lengths on
/// the eval prompts (train prompts when there is no eval set).
pub fn evaluate(params: &ModelParams, train_set: &[TokenizedExample], eval_set: &[TokenizedExample], cfg: &TrainConfig) -> Result<EvalSummaries> {
    let bins = cfg.hist_bins;
    let train_output_loss = loss_summary(params, train_set, bins)?;
    let heldout_output_loss = loss_summary(params, eval_set, bins)?;
    let (mut memorization, mut output_length) = (None, None);
    if cfg.eval_generation {
        if train_set.iter().any(|ex| ex.generation_split().is_some()) {
            memorization = Some(memorization_bleu(params, train_set, cfg.gen_max_new, cfg.bleu_smoothing, bins)?);
        }
        let prompt_source = if eval_set.is_empty() { train_set } else { eval_set };
        let prompts: Vec<_> = prompt_source
            .iter()
            .filter_map(|ex| ex.generation_split().map(|(p, _)| p.to_vec()))
            .collect();
        if !prompts.is_empty() {
            output_length = Some(output_length_stats(params, &prompts, cfg.gen_max_new, bins)?);
        }
    }
    Ok(EvalSummaries {
        train_output_loss,
        heldout_output_loss,
        memorization_bleu: memorization,
        output_length,
    })
}

/// Runs fine-tuning from `init`. When `out_dir` is given, every epoch
/// boundary writes `checkpoints/epoch-N.ckpt`, and the finished run writes
/// `report.json` and `epochs.csv`.
pub fn train(
    train_set: &[TokenizedExample],
    eval_set: &[TokenizedExample],
    init: ModelParams,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = *init.config();
    let mut usable = Vec::with_capacity(train_set.len());
    for ex in train_set {
        if ex.len() > model_cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ex.len(),
                max: model_cfg.max_seq_len,
            });
        }
        match build_loss_mask(ex, cfg.loss_mode) {
            Ok(mask) => usable.push((ex, mask)),
            Err(Error::NoSupervisedTokens) => warn!("skipping `{}`: nothing supervised under {}", ex.source_id, cfg.loss_mode),
            Err(e) => return Err(e),
        }
    }
    if usable.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let objective = ObjectiveConfig {
        mode: cfg.loss_mode,
        kl_lambda: cfg.kl_lambda(),
        noise: None,
    };
    let reference = cfg.use_kl.then(|| ReferenceModel::new(init.clone()));
    let effective = cfg.effective_batch();
    let steps_per_epoch = usable.len().div_ceil(effective) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let adam = cfg.adamw();

    let checkpoint_dir = out_dir.map(|d| d.join("checkpoints"));
    if let Some(dir) = &checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut report = RunReport {
        format_version: REPORT_FORMAT_VERSION,
        vocab_size: model_cfg.vocab_size,
        param_count: init.param_count(),
        model: model_cfg,
        config: cfg.clone(),
        train_examples: usable.len(),
        eval_examples: eval_set.len(),
        total_steps,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut params = init.clone();
    let mut state = OptimizerState::new(&params);
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64)));
        let mut objective_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(effective) {
            let total_active: usize = batch.iter().map(|&i| usable[i].1.active_count()).sum();
            let scale = 1.0 / total_active as f64;
            let mut grads = GradientTape::zeros_like(&params);
            let (mut nll, mut kl) = (0.0, 0.0);
            for micro in batch.chunks(cfg.batch_size) {
                let parts: Vec<ExampleObjective> = micro
                    .par_iter()
                    .map(|&i| {
                        let (ex, mask) = &usable[i];
                        let noise = cfg.use_neftune.then(|| EmbeddingNoise {
                            alpha: cfg.neftune_alpha,
                            seed: mix(mix(cfg.seed, step), i as u64),
                        });
                        let cfg = ObjectiveConfig { noise, ..objective };
                        example_objective(ex, mask, &params, reference.as_ref(), &cfg, scale)
                    })
                    .collect::<Result<_>>()?;
                for (&i, part) in micro.iter().zip(&parts) {
                    if !(part.nll_sum.is_finite() && part.kl_sum.is_finite()) {
                        return Err(Error::NonFiniteLoss {
                            step,
                            example: usable[i].0.source_id.clone(),
                        });
                    }
                    grads.add_assign(&part.grads);
                    nll += part.nll_sum;
                    kl += part.kl_sum;
                }
            }
            lr = lr_at(step, total_steps, cfg.lr, cfg.warmup_fraction);
            adamw_step(&mut params, &grads, &mut state, lr, &adam)?;
            params.check_finite()?;
            objective_sum += match objective.kl_lambda {
                Some(lambda) => (nll + lambda * kl) * scale,
                None => nll * scale,
            };
            step += 1;
        }

        let eval = if cfg.is_eval_epoch(epoch) {
            Some(evaluate(&params, train_set, eval_set, cfg)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            step,
            lr,
            train_objective: objective_sum / steps_per_epoch as f64,
            loss_mode: cfg.loss_mode,
            use_kl: cfg.use_kl,
            kl_lambda: cfg.kl_lambda,
            use_neftune: cfg.use_neftune,
            param_drift_l2: params.l2_distance(&init),
            train_output_loss: eval.as_ref().and_then(|e| e.train_output_loss.clone()),
            heldout_output_loss: eval.as_ref().and_then(|e| e.heldout_output_loss.clone()),
            memorization_bleu: eval.as_ref().and_then(|e| e.memorization_bleu.clone()),
            output_length: eval.as_ref().and_then(|e| e.output_length.clone()),
        };
        info!(
            epoch,
            step,
            objective = record.train_objective,
            heldout = record.heldout_output_loss.as_ref().map(|s| s.mean),
            "epoch finished"
        );
        report.epochs.push(record);
        if let Some(dir) = &checkpoint_dir {
            save_checkpoint(&params, &dir.join(format!("epoch-{epoch}.ckpt")))?;
        }
    }

    if let Some(dir) = out_dir {
        report.save_json(&dir.join("report.json"))?;
        report.write_epoch_csv(&dir.join("epochs.csv"))?;
    }
    Ok(TrainOutcome { params, report })
}
