use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, softmax_prefix, View};
use super::{
    final_norm_index, layer_index, neftune_perturb, GradientTape, ModelParams, Tensor, LN1, LN2, POS_EMB, TOK_EMB, W1, W2,
    WK, WO, WQ, WV,
};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// NEFTune-style noise applied to the token embeddings before positions are
/// added. The noise is drawn from a ChaCha stream seeded with `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingNoise {
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    pub(crate) q: Vec<f64>,
    pub(crate) k: Vec<f64>,
    pub(crate) v: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    b: Vec<f64>,
    u: Vec<f64>,
    gu: Vec<f64>,
}

/// Activations saved by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<TokenId>,
    pub(crate) layers: Vec<LayerCache>,
    xhat_f: Vec<f64>,
    rstd_f: Vec<f64>,
    hf: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `seq_len x vocab_size`; row `t` scores the token at position `t + 1`.
    pub logits: Tensor,
    pub cache: Option<ForwardCache>,
}

impl ForwardOutput {
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }
}

pub(crate) fn check_tokens(params: &ModelParams, tokens: &[TokenId]) -> Result<()> {
    let cfg = params.config();
    if tokens.is_empty() {
        return Err(Error::Shape("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Causal forward pass over one sequence.
pub fn forward(params: &ModelParams, tokens: &[TokenId], noise: Option<EmbeddingNoise>) -> Result<ForwardOutput> {
    check_tokens(params, tokens)?;
    let cfg = *params.config();
    let (l, d, dh, dff, vocab) = (tokens.len(), cfg.d_model, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
    let scale = 1.0 / (dh as f64).sqrt();

    let tok = &params.tensor(TOK_EMB).data;
    let mut emb = Tensor::zeros(l, d);
    for (t, &id) in tokens.iter().enumerate() {
        emb.row_mut(t).copy_from_slice(&tok[id as usize * d..(id as usize + 1) * d]);
    }
    if let Some(noise) = noise {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        emb = neftune_perturb(&emb, noise.alpha, &mut rng);
    }
    let mut x = emb.data;
    let pos = &params.tensor(POS_EMB).data;
    for (xi, pi) in x.iter_mut().zip(&pos[..l * d]) {
        *xi += pi;
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for li in 0..cfg.n_layers {
        let w = |which| params.tensor(layer_index(li, which)).data.as_slice();
        let (a, xhat1, rstd1) = layer_norm(&x, w(LN1), d);
        let mut q = vec![0.0; l * d];
        let mut k = vec![0.0; l * d];
        let mut v = vec![0.0; l * d];
        gemm(l, d, d, View::rows(&a, d), View::rows(w(WQ), d), 0.0, &mut q, d);
        gemm(l, d, d, View::rows(&a, d), View::rows(w(WK), d), 0.0, &mut k, d);
        gemm(l, d, d, View::rows(&a, d), View::rows(w(WV), d), 0.0, &mut v, d);

        let mut probs = vec![0.0; cfg.n_heads * l * l];
        let mut attn = vec![0.0; l * d];
        for h in 0..cfg.n_heads {
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            gemm(l, dh, l, View::rows(&q[h * dh..], d), View::rows(&k[h * dh..], d).t(), 0.0, p, l);
            for i in 0..l {
                let row = &mut p[i * l..(i + 1) * l];
                for s in &mut row[..=i] {
                    *s *= scale;
                }
                softmax_prefix(row, i + 1);
                row[i + 1..].fill(0.0);
            }
            gemm(l, l, dh, View::rows(p, l), View::rows(&v[h * dh..], d), 0.0, &mut attn[h * dh..], d);
        }
        gemm(l, d, d, View::rows(&attn, d), View::rows(w(WO), d), 1.0, &mut x, d);

        let (b, xhat2, rstd2) = layer_norm(&x, w(LN2), d);
        let mut u = vec![0.0; l * dff];
        gemm(l, d, dff, View::rows(&b, d), View::rows(w(W1), dff), 0.0, &mut u, dff);
        let gu: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        gemm(l, dff, d, View::rows(&gu, dff), View::rows(w(W2), d), 1.0, &mut x, d);

        layers.push(LayerCache {
            xhat1,
            rstd1,
            a,
            q,
            k,
            v,
            probs,
            attn,
            xhat2,
            rstd2,
            b,
            u,
            gu,
        });
    }

    let (hf, xhat_f, rstd_f) = layer_norm(&x, &params.tensor(final_norm_index(&cfg)).data, d);
    let mut logits = Tensor::zeros(l, vocab);
    gemm(l, d, vocab, View::rows(&hf, d), View::rows(tok, d).t(), 0.0, &mut logits.data, vocab);

    Ok(ForwardOutput {
        logits,
        cache: Some(ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            xhat_f,
            rstd_f,
            hf,
        }),
    })
}

/// Exact gradients of a scalar loss with respect to every parameter, given
/// the loss gradient with respect to the logits (`seq_len x vocab_size`).
pub fn backward(params: &ModelParams, out: &ForwardOutput, dlogits: &Tensor) -> Result<GradientTape> {
    let cache = out.cache.as_ref().ok_or(Error::MissingCache)?;
    if !dlogits.same_shape(&out.logits) {
        return Err(Error::Shape(format!(
            "logit gradient is {}x{}, logits are {}x{}",
            dlogits.rows, dlogits.cols, out.logits.rows, out.logits.cols
        )));
    }
    let cfg = *params.config();
    let (l, d, dh, dff, vocab) = (cache.tokens.len(), cfg.d_model, cfg.head_dim(), cfg.d_ff, cfg.vocab_size);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = GradientTape::zeros_like(params);
    let tok = &params.tensor(TOK_EMB).data;

    // Tied output head.
    gemm(
        vocab,
        l,
        d,
        View::rows(&dlogits.data, vocab).t(),
        View::rows(&cache.hf, d),
        1.0,
        &mut grads.tensor_mut(TOK_EMB).data,
        d,
    );
    let mut dhf = vec![0.0; l * d];
    gemm(l, vocab, d, View::rows(&dlogits.data, vocab), View::rows(tok, d), 0.0, &mut dhf, d);
    let mut dx = vec![0.0; l * d];
    let fin = final_norm_index(&cfg);
    layer_norm_backward(
        &dhf,
        &cache.xhat_f,
        &cache.rstd_f,
        &params.tensor(fin).data,
        d,
        &mut grads.tensor_mut(fin).data,
        &mut dx,
    );

    let mut dgu = vec![0.0; l * dff];
    let mut db = vec![0.0; l * d];
    let mut dattn = vec![0.0; l * d];
    let mut dp = vec![0.0; l * l];
    let mut da = vec![0.0; l * d];
    for li in (0..cfg.n_layers).rev() {
        let c = &cache.layers[li];
        let w = |which| params.tensor(layer_index(li, which)).data.as_slice();

        // x_out = x_mid + gelu(b W1) W2
        gemm(dff, l, d, View::rows(&c.gu, dff).t(), View::rows(&dx, d), 1.0, &mut grads.tensor_mut(layer_index(li, W2)).data, d);
        gemm(l, d, dff, View::rows(&dx, d), View::rows(w(W2), d).t(), 0.0, &mut dgu, dff);
        for (g, &u) in dgu.iter_mut().zip(&c.u) {
            *g *= gelu_grad(u);
        }
        gemm(d, l, dff, View::rows(&c.b, d).t(), View::rows(&dgu, dff), 1.0, &mut grads.tensor_mut(layer_index(li, W1)).data, dff);
        gemm(l, dff, d, View::rows(&dgu, dff), View::rows(w(W1), dff).t(), 0.0, &mut db, d);
        layer_norm_backward(&db, &c.xhat2, &c.rstd2, w(LN2), d, &mut grads.tensor_mut(layer_index(li, LN2)).data, &mut dx);

        // x_mid = x_in + attn Wo
        gemm(d, l, d, View::rows(&c.attn, d).t(), View::rows(&dx, d), 1.0, &mut grads.tensor_mut(layer_index(li, WO)).data, d);
        gemm(l, d, d, View::rows(&dx, d), View::rows(w(WO), d).t(), 0.0, &mut dattn, d);

        let mut dq = vec![0.0; l * d];
        let mut dk = vec![0.0; l * d];
        let mut dv = vec![0.0; l * d];
        for h in 0..cfg.n_heads {
            let p = &c.probs[h * l * l..(h + 1) * l * l];
            let do_h = View::rows(&dattn[h * dh..], d);
            gemm(l, dh, l, do_h, View::rows(&c.v[h * dh..], d).t(), 0.0, &mut dp, l);
            gemm(l, l, dh, View::rows(p, l).t(), do_h, 0.0, &mut dv[h * dh..], d);
            for i in 0..l {
                let prow = &p[i * l..(i + 1) * l];
                let drow = &mut dp[i * l..(i + 1) * l];
                let dot: f64 = prow[..=i].iter().zip(&drow[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - dot) * scale;
                }
                drow[i + 1..].fill(0.0);
            }
            gemm(l, l, dh, View::rows(&dp, l), View::rows(&c.k[h * dh..], d), 0.0, &mut dq[h * dh..], d);
            gemm(l, l, dh, View::rows(&dp, l).t(), View::rows(&c.q[h * dh..], d), 0.0, &mut dk[h * dh..], d);
        }
        let a = View::rows(&c.a, d).t();
        gemm(d, l, d, a, View::rows(&dq, d), 1.0, &mut grads.tensor_mut(layer_index(li, WQ)).data, d);
        gemm(d, l, d, a, View::rows(&dk, d), 1.0, &mut grads.tensor_mut(layer_index(li, WK)).data, d);
        gemm(d, l, d, a, View::rows(&dv, d), 1.0, &mut grads.tensor_mut(layer_index(li, WV)).data, d);
        gemm(l, d, d, View::rows(&dq, d), View::rows(w(WQ), d).t(), 0.0, &mut da, d);
        gemm(l, d, d, View::rows(&dk, d), View::rows(w(WK), d).t(), 1.0, &mut da, d);
        gemm(l, d, d, View::rows(&dv, d), View::rows(w(WV), d).t(), 1.0, &mut da, d);
        layer_norm_backward(&da, &c.xhat1, &c.rstd1, w(LN1), d, &mut grads.tensor_mut(layer_index(li, LN1)).data, &mut dx);
    }

    let gtok = &mut grads.tensor_mut(TOK_EMB).data;
    for (t, &id) in cache.tokens.iter().enumerate() {
        let row = &mut gtok[id as usize * d..(id as usize + 1) * d];
        for (g, v) in row.iter_mut().zip(&dx[t * d..(t + 1) * d]) {
            *g += v;
        }
    }
    let gpos = &mut grads.tensor_mut(POS_EMB).data;
    for (g, v) in gpos[..l * d].iter_mut().zip(&dx) {
        *g += v;
    }
    Ok(grads)
}
