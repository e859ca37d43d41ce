//! Fixtures shared by the benchmarks in `benches/`.

use quids_core::corpus::{build_vocab, generate_synthetic_corpus, SyntheticSpec};
use quids_core::model::PreparedSample;
use quids_core::training::prepare_training_examples;
use quids_core::{Dataset, Model, ModelConfig};

pub struct Fixture {
    pub dataset: Dataset,
    pub model: Model,
    pub batch: Vec<PreparedSample>,
}

/// Synthetic corpus of `samples` records and a model of the given width.
pub fn fixture(samples: usize, d_model: usize) -> Fixture {
    let spec = SyntheticSpec {
        samples,
        seed: 1,
        ..SyntheticSpec::default()
    };
    let dataset = generate_synthetic_corpus(&spec).expect("valid spec");
    let vocab = build_vocab(&dataset, 10_000).expect("non-empty corpus");
    let batch = prepare_training_examples(&dataset, &vocab, None, false)
        .expect("corpus has negatives")
        .into_iter()
        .map(|e| PreparedSample {
            negative: e.negatives.first().cloned(),
            ..e.sample
        })
        .collect();
    let config = ModelConfig {
        d_model,
        heads: 4,
        ffn_dim: 2 * d_model,
        max_source_len: 64,
        max_target_len: 16,
        ..ModelConfig::default()
    };
    let model = Model::new(config, vocab).expect("valid config");
    Fixture { dataset, model, batch }
}
