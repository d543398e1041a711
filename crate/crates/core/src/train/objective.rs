//! Per-example training objective: masked NLL plus an optional KL penalty
//! towards a frozen reference model.

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedExample;
use crate::error::{Error, Result};
use crate::masking::{build_loss_mask, LossMask, MaskMode};
use crate::model::{
    backward, cross_entropy_masked, forward, log_softmax_row, masked_nll_grad, EmbeddingNoise, ForwardOutput,
    GradientTape, ModelParams, Reduction,
};

/// Frozen copy of the parameters at the start of fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel(ModelParams);

impl ReferenceModel {
    pub fn new(params: ModelParams) -> Self {
        Self(params)
    }

    pub fn params(&self) -> &ModelParams {
        &self.0
    }
}

/// `KL(p || q)` between the softmaxes of two logits rows, together with its
/// gradient with respect to the `p` logits.
pub fn kl_row(student: &[f64], reference: &[f64]) -> (f64, Vec<f64>) {
    let logp = log_softmax_row(student);
    let logq = log_softmax_row(reference);
    let kl: f64 = logp.iter().zip(&logq).map(|(lp, lq)| lp.exp() * (lp - lq)).sum();
    let grad = logp.iter().zip(&logq).map(|(lp, lq)| lp.exp() * (lp - lq - kl)).collect();
    (kl, grad)
}

/// Objective settings shared by [`example_objective`] and the training loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub mode: MaskMode,
    /// `Some(lambda)` enables the KL term.
    pub kl_lambda: Option<f64>,
    pub noise: Option<EmbeddingNoise>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub objective: f64,
    pub nll: f64,
    pub kl: f64,
    pub active: usize,
}

/// Sum-reduced pieces of one example's objective and the gradient of
/// `scale * (nll_sum + lambda * kl_sum)`.
#[derive(Debug, Clone)]
pub struct ExampleObjective {
    pub nll_sum: f64,
    pub kl_sum: f64,
    pub active: usize,
    pub grads: GradientTape,
}

pub fn example_objective(
    ex: &TokenizedExample,
    mask: &LossMask,
    params: &ModelParams,
    reference: Option<&ReferenceModel>,
    cfg: &ObjectiveConfig,
    scale: f64,
) -> Result<ExampleObjective> {
    let out = forward(params, &ex.tokens, cfg.noise)?;
    let targets = &ex.tokens[1..];
    let (nll_sum, _) = cross_entropy_masked(&out, targets, mask, Reduction::Sum)?;
    let mut dlogits = masked_nll_grad(&out, targets, mask, scale)?;
    let mut kl_sum = 0.0;
    if let Some(lambda) = cfg.kl_lambda {
        let reference = reference.ok_or_else(|| Error::Config("KL term enabled without a reference model".into()))?;
        let ref_out: ForwardOutput = forward(reference.params(), &ex.tokens, None)?.without_cache();
        for t in (0..targets.len()).filter(|&t| mask.is_active(t)) {
            let (kl, grad) = kl_row(out.logits.row(t), ref_out.logits.row(t));
            kl_sum += kl;
            for (g, k) in dlogits.row_mut(t).iter_mut().zip(&grad) {
                *g += scale * lambda * k;
            }
        }
    }
    let grads = backward(params, &out, &dlogits)?;
    Ok(ExampleObjective {
        nll_sum,
        kl_sum,
        active: mask.active_count(),
        grads,
    })
}

/// Mean-over-active objective of a single example and its gradient.
pub fn training_loss(
    ex: &TokenizedExample,
    params: &ModelParams,
    reference: Option<&ReferenceModel>,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, GradientTape)> {
    let mask = build_loss_mask(ex, cfg.mode)?;
    let active = mask.active_count();
    let scale = 1.0 / active as f64;
    let parts = example_objective(ex, &mask, params, reference, cfg, scale)?;
    let nll = parts.nll_sum * scale;
    let kl = parts.kl_sum * scale;
    let objective = match cfg.kl_lambda {
        Some(lambda) => nll + lambda * kl,
        None => nll,
    };
    Ok((
        LossBreakdown {
            objective,
            nll,
            kl,
            active,
        },
        parts.grads,
    ))
}
