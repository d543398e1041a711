//! Helpers shared by the model tests and the acceptance suite.
#![allow(dead_code)]

use instmod::corpus::{SegmentRole, TokenizedExample};
use instmod::model::{init_params, ModelConfig, ModelParams};
use instmod::train::{training_loss, ObjectiveConfig, ReferenceModel};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        seed: 11,
    }
}

/// Init with larger weights and non-unit gains so every nonlinearity is
/// exercised away from its linear regime.
pub fn rough_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut params = init_params(&ModelConfig { seed, ..*cfg }).unwrap();
    let specs = cfg.tensor_specs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for (spec, t) in specs.iter().zip(params.tensors_mut()) {
        for v in &mut t.data {
            if spec.name.contains("ln") {
                *v = rng.random_range(0.6..1.4);
            } else {
                *v *= 15.0;
            }
        }
    }
    params
}

pub fn sample_example() -> TokenizedExample {
    use SegmentRole::{Completion as C, Instruction as I, Template as T};
    TokenizedExample::new(vec![0, 1, 3, 4, 2, 5, 6, 7], vec![T, T, I, I, T, C, C, C], "grad").unwrap()
}

pub fn max_relative_error(params: &ModelParams, ex: &TokenizedExample, reference: Option<&ReferenceModel>, cfg: &ObjectiveConfig) -> f64 {
    let (_, tape) = training_loss(ex, params, reference, cfg).unwrap();
    let analytic = tape.flat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut k = 0;
    for ti in 0..params.tensors().len() {
        for j in 0..params.tensors()[ti].data.len() {
            let mut p = params.clone();
            p.tensors_mut()[ti].data[j] += h;
            let plus = training_loss(ex, &p, reference, cfg).unwrap().0.objective;
            p.tensors_mut()[ti].data[j] -= 2.0 * h;
            let minus = training_loss(ex, &p, reference, cfg).unwrap().0.objective;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k];
            // Floor keeps exactly-zero entries (unused positions) well defined.
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
            k += 1;
        }
    }
    assert_eq!(k, analytic.len());
    worst
}
