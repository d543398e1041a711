use serde::{Deserialize, Serialize};

use super::{ForwardOutput, Tensor};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::masking::LossMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    MeanOverActive,
    Sum,
}

/// Numerically stable `log softmax` of one logits row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn check_alignment(out: &ForwardOutput, targets: &[TokenId], mask: &LossMask) -> Result<()> {
    if targets.len() + 1 != out.logits.rows || mask.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            out.logits.rows,
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&id) = targets.iter().find(|&&id| id as usize >= out.logits.cols) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: out.logits.cols,
        });
    }
    if mask.active_count() == 0 {
        return Err(Error::NoSupervisedTokens);
    }
    Ok(())
}

/// Masked next-token negative log-likelihood. `targets[t]` is predicted from
/// logits row `t`; inactive positions contribute exactly zero.
pub fn cross_entropy_masked(out: &ForwardOutput, targets: &[TokenId], mask: &LossMask, reduction: Reduction) -> Result<(f64, Vec<f64>)> {
    check_alignment(out, targets, mask)?;
    let per_token: Vec<f64> = targets
        .iter()
        .enumerate()
        .map(|(t, &target)| {
            if mask.is_active(t) {
                -log_softmax_row(out.logits.row(t))[target as usize]
            } else {
                0.0
            }
        })
        .collect();
    let sum: f64 = per_token.iter().sum();
    let loss = match reduction {
        Reduction::Sum => sum,
        Reduction::MeanOverActive => sum / mask.active_count() as f64,
    };
    Ok((loss, per_token))
}

/// Gradient of `scale * sum_t mask[t] * nll_t` with respect to the logits.
/// The last logits row (no target) receives zero gradient.
pub fn masked_nll_grad(out: &ForwardOutput, targets: &[TokenId], mask: &LossMask, scale: f64) -> Result<Tensor> {
    check_alignment(out, targets, mask)?;
    let mut grad = Tensor::zeros(out.logits.rows, out.logits.cols);
    for (t, &target) in targets.iter().enumerate() {
        if !mask.is_active(t) {
            continue;
        }
        let logp = log_softmax_row(out.logits.row(t));
        let row = grad.row_mut(t);
        for (g, lp) in row.iter_mut().zip(&logp) {
            *g = scale * lp.exp();
        }
        row[target as usize] -= scale;
    }
    Ok(grad)
}
