//! Overfitting and memorization diagnostics: sentence-level BLEU-4 over
//! token ids, loss/length distribution summaries, and the generation-based
//! measurements built on greedy decoding.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::corpus::{TokenId, TokenizedExample, Vocabulary};
use crate::error::{Error, Result};
use crate::masking::{build_loss_mask, MaskMode};
use crate::model::{cross_entropy_masked, forward, generate_greedy, ModelParams, Reduction};

pub const BLEU_MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: [f64; BLEU_MAX_ORDER],
    pub brevity_penalty: f64,
    /// Set when either side is empty; such scores are 0 with a zero penalty.
    pub degenerate: bool,
}

fn ngram_counts(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    for gram in seq.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Single-reference BLEU with clipped n-gram precisions for `n = 1..=4`,
/// uniform weights and the standard brevity penalty.
///
/// An order for which the candidate has no n-grams at all (candidate shorter
/// than `n`) has precision 1, so `bleu4(x, x) == 1` for every non-empty `x`;
/// short candidates are still penalized through the brevity penalty. With
/// `smoothing`, a zero precision `0 / total` becomes `1 / (total + 1)`.
pub fn bleu4(candidate: &[TokenId], reference: &[TokenId], smoothing: bool) -> BleuScore {
    if candidate.is_empty() || reference.is_empty() {
        return BleuScore {
            score: 0.0,
            precisions: [0.0; BLEU_MAX_ORDER],
            brevity_penalty: 0.0,
            degenerate: true,
        };
    }
    let mut precisions = [1.0; BLEU_MAX_ORDER];
    for (i, p) in precisions.iter_mut().enumerate() {
        let n = i + 1;
        let total = candidate.len().saturating_sub(n - 1);
        if total == 0 {
            continue;
        }
        let reference_counts = ngram_counts(reference, n);
        let matched: usize = ngram_counts(candidate, n)
            .iter()
            .map(|(gram, &count)| count.min(reference_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        *p = if matched == 0 && smoothing {
            1.0 / (total + 1) as f64
        } else {
            matched as f64 / total as f64
        };
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let brevity_penalty = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_MAX_ORDER as f64).exp()
    };
    BleuScore {
        score,
        precisions,
        brevity_penalty,
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// `n_bins + 1` equal-width edges spanning `[min, max]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Population mean/std and an equal-width histogram. The last bin is closed
/// on the right; a constant sample lands entirely in the first bin.
pub fn loss_distribution(values: &[f64], n_bins: usize) -> Result<DistributionSummary> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be at least 1".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / n_bins as f64;
    let edges = (0..=n_bins).map(|i| min + width * i as f64).collect();
    let mut counts = vec![0; n_bins];
    for &v in values {
        let bin = if width > 0.0 {
            (((v - min) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        counts[bin] += 1;
    }
    Ok(DistributionSummary {
        count: values.len(),
        mean,
        std,
        min,
        max,
        edges,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleLoss {
    pub id: String,
    pub loss: f64,
}

/// Mean NLL over completion-role targets of each example, whatever the
/// training objective was. Examples without completion targets are skipped.
pub fn per_example_output_loss(params: &ModelParams, examples: &[TokenizedExample]) -> Result<Vec<ExampleLoss>> {
    let losses: Vec<Option<ExampleLoss>> = examples
        .par_iter()
        .map(|ex| {
            let mask = match build_loss_mask(ex, MaskMode::It) {
                Ok(mask) => mask,
                Err(Error::NoSupervisedTokens) => {
                    warn!("skipping `{}`: no completion tokens", ex.source_id);
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let out = forward(params, &ex.tokens, None)?.without_cache();
            let (loss, _) = cross_entropy_masked(&out, &ex.tokens[1..], &mask, Reduction::MeanOverActive)?;
            Ok(Some(ExampleLoss {
                id: ex.source_id.clone(),
                loss,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(losses.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub generated: Vec<TokenId>,
    /// Generated tokens excluding the stop token.
    pub gen_len: usize,
    pub bleu: BleuScore,
}

fn decode_budget(params: &ModelParams, prompt_len: usize, max_new: usize) -> usize {
    max_new.min(params.config().max_seq_len.saturating_sub(prompt_len))
}

fn strip_eos(mut generated: Vec<TokenId>) -> Vec<TokenId> {
    if generated.last() == Some(&Vocabulary::EOS) {
        generated.pop();
    }
    generated
}

/// Greedy-decodes each example from its prompt (everything up to the last
/// assistant tag) and scores the output against the ground-truth completion.
pub fn generate_for_examples(params: &ModelParams, examples: &[TokenizedExample], max_new: usize, smoothing: bool) -> Result<Vec<GenerationRecord>> {
    examples
        .par_iter()
        .filter_map(|ex| {
            let split = ex.generation_split();
            if split.is_none() {
                warn!("skipping `{}`: no assistant turn to generate", ex.source_id);
            }
            split.map(|(prompt, reference)| (ex, prompt, reference))
        })
        .map(|(ex, prompt, reference)| {
            let budget = decode_budget(params, prompt.len(), max_new);
            let generated = strip_eos(generate_greedy(params, prompt, budget, Some(Vocabulary::EOS))?);
            Ok(GenerationRecord {
                id: ex.source_id.clone(),
                gen_len: generated.len(),
                bleu: bleu4(&generated, &reference, smoothing),
                generated,
            })
        })
        .collect()
}

/// Distribution of memorization BLEU over a training set; the mean is the
/// headline number.
pub fn memorization_bleu(params: &ModelParams, train_set: &[TokenizedExample], max_new: usize, smoothing: bool, n_bins: usize) -> Result<DistributionSummary> {
    let records = generate_for_examples(params, train_set, max_new, smoothing)?;
    let scores: Vec<f64> = records.iter().map(|r| r.bleu.score).collect();
    loss_distribution(&scores, n_bins)
}

/// Distribution of greedy output lengths (stop token excluded).
pub fn output_length_stats(params: &ModelParams, prompts: &[Vec<TokenId>], max_new: usize, n_bins: usize) -> Result<DistributionSummary> {
    let lengths: Vec<f64> = prompts
        .par_iter()
        .map(|prompt| {
            let budget = decode_budget(params, prompt.len(), max_new);
            let generated = strip_eos(generate_greedy(params, prompt, budget, Some(Vocabulary::EOS))?);
            Ok(generated.len() as f64)
        })
        .collect::<Result<_>>()?;
    loss_distribution(&lengths, n_bins)
}
