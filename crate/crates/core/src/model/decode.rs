use super::ops::{gelu, gemm, layer_norm, softmax_prefix, View};
use super::transformer::check_tokens;
use super::{final_norm_index, forward, layer_index, ModelParams, LN1, LN2, POS_EMB, TOK_EMB, W1, W2, WK, WO, WQ, WV};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// Incremental decoder holding per-layer keys and values for every position
/// seen so far.
pub struct DecodeState<'a> {
    params: &'a ModelParams,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    logits: Vec<f64>,
}

impl<'a> DecodeState<'a> {
    pub fn prefill(params: &'a ModelParams, prompt: &[TokenId]) -> Result<Self> {
        let out = forward(params, prompt, None)?;
        let cache = out.cache.expect("forward always caches");
        let last = out.logits.row(prompt.len() - 1).to_vec();
        let (keys, values) = cache.layers.into_iter().map(|c| (c.k, c.v)).unzip();
        Ok(Self {
            params,
            keys,
            values,
            len: prompt.len(),
            logits: last,
        })
    }

    /// Logits for the token following everything consumed so far.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn step(&mut self, token: TokenId) -> Result<()> {
        let params = self.params;
        let cfg = *params.config();
        check_tokens(params, &[token])?;
        if self.len >= cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.len + 1,
                max: cfg.max_seq_len,
            });
        }
        let (d, dh, dff, vocab) = (cfg.d_model, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
        let scale = 1.0 / (dh as f64).sqrt();
        let tok = &params.tensor(TOK_EMB).data;
        let pos = &params.tensor(POS_EMB).data;
        let id = token as usize;
        let mut x: Vec<f64> = tok[id * d..(id + 1) * d]
            .iter()
            .zip(&pos[self.len * d..(self.len + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let n = self.len + 1;
        let mut scores = vec![0.0; n];
        for li in 0..cfg.n_layers {
            let w = |which| params.tensor(layer_index(li, which)).data.as_slice();
            let (a, _, _) = layer_norm(&x, w(LN1), d);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            gemm(1, d, d, View::rows(&a, d), View::rows(w(WQ), d), 0.0, &mut q, d);
            gemm(1, d, d, View::rows(&a, d), View::rows(w(WK), d), 0.0, &mut k, d);
            gemm(1, d, d, View::rows(&a, d), View::rows(w(WV), d), 0.0, &mut v, d);
            let keys = &mut self.keys[li];
            let values = &mut self.values[li];
            keys.extend_from_slice(&k);
            values.extend_from_slice(&v);

            let mut attn = vec![0.0; d];
            for h in 0..cfg.n_heads {
                gemm(1, dh, n, View::rows(&q[h * dh..], d), View::rows(&keys[h * dh..], d).t(), 0.0, &mut scores, n);
                for s in &mut scores {
                    *s *= scale;
                }
                softmax_prefix(&mut scores, n);
                gemm(1, n, dh, View::rows(&scores, n), View::rows(&values[h * dh..], d), 0.0, &mut attn[h * dh..], d);
            }
            gemm(1, d, d, View::rows(&attn, d), View::rows(w(WO), d), 1.0, &mut x, d);
            let (b, _, _) = layer_norm(&x, w(LN2), d);
            let mut u = vec![0.0; dff];
            gemm(1, d, dff, View::rows(&b, d), View::rows(w(W1), dff), 0.0, &mut u, dff);
            let gu: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            gemm(1, dff, d, View::rows(&gu, dff), View::rows(w(W2), d), 1.0, &mut x, d);
        }
        let (hf, _, _) = layer_norm(&x, &params.tensor(final_norm_index(&cfg)).data, d);
        self.logits.resize(vocab, 0.0);
        gemm(1, d, vocab, View::rows(&hf, d), View::rows(tok, d).t(), 0.0, &mut self.logits, vocab);
        self.len = n;
        Ok(())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Greedy decoding. Returns the generated tokens, including the stop token
/// when one was produced.
pub fn generate_greedy(params: &ModelParams, prompt: &[TokenId], max_new: usize, eos: Option<TokenId>) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::Config("empty prompt".into()));
    }
    let max = params.config().max_seq_len;
    if prompt.len() + max_new > max {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + max_new,
            max,
        });
    }
    let mut out = Vec::with_capacity(max_new);
    if max_new == 0 {
        return Ok(out);
    }
    let mut state = DecodeState::prefill(params, prompt)?;
    for i in 0..max_new {
        let next = argmax(state.logits());
        out.push(next);
        if Some(next) == eos {
            break;
        }
        if i + 1 < max_new {
            state.step(next)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 1.0, 1.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }
}
