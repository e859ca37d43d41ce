#![allow(dead_code)]

use quids_core::corpus::Vocabulary;
use quids_core::model::{ModelConfig, PreparedSample};
use quids_core::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Vocabulary of exactly `size` tokens.
pub fn vocab(size: usize) -> Vocabulary {
    Vocabulary::from_words((0..size - Vocabulary::NUM_SPECIALS).map(|i| format!("w{i}")))
}

pub fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::tiny(64)
    };
    Model::new(cfg, vocab(64)).unwrap()
}

fn words(rng: &mut ChaCha8Rng, n: usize, vocab_size: usize) -> Vec<u32> {
    (0..n)
        .map(|_| rng.random_range(Vocabulary::NUM_SPECIALS as u32..vocab_size as u32))
        .collect()
}

/// Random prepared samples with two relevant documents and one negative.
pub fn random_batch(seed: u64, size: usize, vocab_size: usize) -> Vec<PreparedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|i| PreparedSample {
            id: format!("s{i}"),
            query: words(&mut rng, 3, vocab_size),
            relevant: vec![
                words(&mut rng, 5, vocab_size),
                words(&mut rng, 4, vocab_size),
            ],
            negative: Some(words(&mut rng, 5, vocab_size)),
            target: words(&mut rng, 5, vocab_size),
        })
        .collect()
}
pub mod experiment;

/// Deterministic pseudo-random embedding keyed by the text's hash.
pub struct HashEmbedder {
    pub dim: usize,
}

impl quids_core::EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> quids_core::Result<quids_core::EmbeddingVector> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        quids_core::EmbeddingVector::new(
            (0..self.dim)
                .map(|_| rng.random_range(-0.25..1.0))
                .collect(),
        )
    }
}
