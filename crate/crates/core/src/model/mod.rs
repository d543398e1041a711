//! A tiny pre-norm decoder-only transformer in `f64` with hand-written
//! reverse-mode gradients.
//!
//! Architecture: token embedding (tied with the output head) plus learned
//! absolute positions, `n_layers` blocks of causal multi-head attention and a
//! GELU feed-forward, each preceded by a gain-only layer norm, and a final
//! gain-only layer norm. No biases.

mod checkpoint;
mod decode;
mod loss;
mod ops;
mod transformer;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{generate_greedy, DecodeState};
pub use loss::{cross_entropy_masked, log_softmax_row, masked_nll_grad, Reduction};
pub use transformer::{backward, forward, EmbeddingNoise, ForwardCache, ForwardOutput};

const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::corpus::Vocabulary::SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let d = self.d_model;
        let mut specs = vec![
            TensorSpec::new("tok_emb", self.vocab_size, d),
            TensorSpec::new("pos_emb", self.max_seq_len, d),
        ];
        for l in 0..self.n_layers {
            specs.extend([
                TensorSpec::new(format!("layer{l}.ln1"), 1, d),
                TensorSpec::new(format!("layer{l}.wq"), d, d),
                TensorSpec::new(format!("layer{l}.wk"), d, d),
                TensorSpec::new(format!("layer{l}.wv"), d, d),
                TensorSpec::new(format!("layer{l}.wo"), d, d),
                TensorSpec::new(format!("layer{l}.ln2"), 1, d),
                TensorSpec::new(format!("layer{l}.w1"), d, self.d_ff),
                TensorSpec::new(format!("layer{l}.w2"), self.d_ff, d),
            ]);
        }
        specs.push(TensorSpec::new("ln_f", 1, d));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.tensor_specs().iter().map(|s| s.rows * s.cols).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} tensor", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// Tensor indices within a parameter set.
pub(crate) const TOK_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;
pub(crate) const LAYER_BASE: usize = 2;
pub(crate) const PER_LAYER: usize = 8;
pub(crate) const LN1: usize = 0;
pub(crate) const WQ: usize = 1;
pub(crate) const WK: usize = 2;
pub(crate) const WV: usize = 3;
pub(crate) const WO: usize = 4;
pub(crate) const LN2: usize = 5;
pub(crate) const W1: usize = 6;
pub(crate) const W2: usize = 7;

pub(crate) fn layer_index(layer: usize, which: usize) -> usize {
    LAYER_BASE + layer * PER_LAYER + which
}

pub(crate) fn final_norm_index(cfg: &ModelConfig) -> usize {
    LAYER_BASE + cfg.n_layers * PER_LAYER
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Builds a parameter set from explicit tensors, checking shapes against
    /// `config`.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.tensor_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", specs.len(), tensors.len())));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if (spec.rows, spec.cols) != (t.rows, t.cols) {
                return Err(Error::Shape(format!(
                    "{} is {}x{}, expected {}x{}",
                    spec.name, t.rows, t.cols, spec.rows, spec.cols
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&Tensor> {
        let idx = self.config.tensor_specs().iter().position(|s| s.name == name)?;
        Some(&self.tensors[idx])
    }

    pub fn tensor_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self.config.tensor_specs().iter().position(|s| s.name == name)?;
        Some(&mut self.tensors[idx])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Fails with the name of the first tensor holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        let specs = self.config.tensor_specs();
        match self.tensors.iter().position(|t| !t.is_finite()) {
            Some(i) => Err(Error::NonFiniteParameter {
                tensor: specs[i].name.clone(),
            }),
            None => Ok(()),
        }
    }

    /// Euclidean distance between two parameter sets of the same config.
    pub fn l2_distance(&self, other: &ModelParams) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

/// Deterministic initialization from `cfg.seed`: embeddings and projections
/// ~ N(0, 0.02²), norm gains 1.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = cfg
        .tensor_specs()
        .iter()
        .map(|spec| {
            if spec.name.contains("ln") {
                Tensor {
                    rows: spec.rows,
                    cols: spec.cols,
                    data: vec![1.0; spec.rows * spec.cols],
                }
            } else {
                let data = (0..spec.rows * spec.cols).map(|_| normal.sample(&mut rng)).collect();
                Tensor {
                    rows: spec.rows,
                    cols: spec.cols,
                    data,
                }
            }
        })
        .collect();
    Ok(ModelParams {
        config: *cfg,
        tensors,
    })
}

/// Gradients for every parameter tensor, shaped exactly like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    tensors: Vec<Tensor>,
}

impl GradientTape {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.data.fill(0.0);
        }
    }

    pub fn matches(&self, params: &ModelParams) -> bool {
        self.tensors.len() == params.tensors.len()
            && self.tensors.iter().zip(&params.tensors).all(|(g, p)| g.same_shape(p))
    }

    pub fn add_assign(&mut self, other: &GradientTape) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    /// Flattened view in storage order, mainly for tests.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

/// Adds independent `U[-1, 1]` noise scaled by `alpha / sqrt(L * d)` to an
/// `L x d` embedding matrix. `alpha == 0` returns an exact copy.
pub fn neftune_perturb<R: Rng + ?Sized>(embeddings: &Tensor, alpha: f64, rng: &mut R) -> Tensor {
    let mut out = embeddings.clone();
    if alpha == 0.0 {
        return out;
    }
    let scale = alpha / ((embeddings.rows * embeddings.cols) as f64).sqrt();
    let uniform = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    for v in &mut out.data {
        *v += scale * uniform.sample(rng);
    }
    out
}
