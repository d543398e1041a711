//! Synthetic instruction/answer corpora with controllable length ratio.
//!
//! Lengths are measured the way [`crate::corpus::dataset_stats`] measures
//! them: instruction length is the user message in bytes, output length is
//! the assistant message in bytes plus its closing end-of-sequence token.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ChatExample, ChatMessage, Role};
use crate::error::{Error, Result};

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    /// Answer is the bracketed span of the instruction.
    Copy,
    /// Answer is the bracketed span, reversed.
    Reverse,
    /// Instruction lists key/value records and asks for one key's value.
    Lookup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub task: SynthTask,
    pub n_examples: usize,
    pub instr_len_mean: usize,
    pub out_len_mean: usize,
    /// Number of distinct content symbols drawn from.
    pub vocab_subset: usize,
    pub seed: u64,
}

impl SyntheticCorpusSpec {
    pub fn target_ratio(&self) -> f64 {
        self.instr_len_mean as f64 / self.out_len_mean as f64
    }

    fn answer_len(&self) -> usize {
        self.out_len_mean - 1
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::CorpusSpec(msg));
        if self.n_examples == 0 {
            return err("n_examples must be at least 1".into());
        }
        if self.out_len_mean < 2 {
            return err(format!(
                "out_len_mean {} leaves no answer bytes (the end-of-sequence token counts towards the output)",
                self.out_len_mean
            ));
        }
        if !(2..=ALPHABET.len()).contains(&self.vocab_subset) {
            return err(format!("vocab_subset must lie in 2..={}", ALPHABET.len()));
        }
        let min_instr = match self.task {
            SynthTask::Copy | SynthTask::Reverse => self.answer_len() + 2,
            SynthTask::Lookup => 5,
        };
        if self.instr_len_mean < min_instr {
            return err(format!(
                "{:?} needs instr_len_mean >= {min_instr}, got {}",
                self.task, self.instr_len_mean
            ));
        }
        Ok(())
    }
}

fn symbols(rng: &mut ChaCha8Rng, alphabet: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

fn span_task(rng: &mut ChaCha8Rng, spec: &SyntheticCorpusSpec, alphabet: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let answer = symbols(rng, alphabet, spec.answer_len());
    let filler = spec.instr_len_mean - answer.len() - 2;
    let before = rng.random_range(0..=filler);
    let mut instr = symbols(rng, alphabet, before);
    instr.push(b'[');
    instr.extend_from_slice(&answer);
    instr.push(b']');
    instr.extend(symbols(rng, alphabet, filler - before));
    let out = match spec.task {
        SynthTask::Reverse => answer.iter().rev().copied().collect(),
        _ => answer,
    };
    (instr, out)
}

fn lookup_task(rng: &mut ChaCha8Rng, spec: &SyntheticCorpusSpec, alphabet: &[u8]) -> (Vec<u8>, Vec<u8>) {
    // Records are `key v1 v2`, the query is `? key`; spare bytes become
    // leading '.' padding.
    let n_records = ((spec.instr_len_mean - 2) / 3).min(alphabet.len());
    let mut keys = alphabet.to_vec();
    keys.shuffle(rng);
    keys.truncate(n_records);
    let values: Vec<Vec<u8>> = (0..n_records).map(|_| symbols(rng, alphabet, 2)).collect();
    let target = rng.random_range(0..n_records);
    let mut instr = vec![b'.'; spec.instr_len_mean - 3 * n_records - 2];
    for (k, v) in keys.iter().zip(&values) {
        instr.push(*k);
        instr.extend_from_slice(v);
    }
    instr.push(b'?');
    instr.push(keys[target]);
    let out = values[target].iter().copied().cycle().take(spec.answer_len()).collect();
    (instr, out)
}

/// Deterministic corpus for `spec`; ids are `{task}-{index}`.
pub fn synth_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<ChatExample>> {
    spec.validate()?;
    let alphabet = &ALPHABET[..spec.vocab_subset];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let name = format!("{:?}", spec.task).to_lowercase();
    Ok((0..spec.n_examples)
        .map(|i| {
            let (instr, out) = match spec.task {
                SynthTask::Copy | SynthTask::Reverse => span_task(&mut rng, spec, alphabet),
                SynthTask::Lookup => lookup_task(&mut rng, spec, alphabet),
            };
            let text = |b: Vec<u8>| String::from_utf8(b).expect("ascii alphabet");
            ChatExample::new(
                format!("{name}-{i}"),
                vec![ChatMessage::new(Role::User, text(instr)), ChatMessage::new(Role::Assistant, text(out))],
            )
        })
        .collect())
}
