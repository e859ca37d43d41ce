//! Desk-scale comparison of the full model against the decoder-loss ablation
//! on the synthetic corpus.

use std::time::{Duration, Instant};

use quids_core::corpus::{
    build_vocab, generate_synthetic_corpus, topic_of_token, word_tokens, Dataset, SyntheticSpec,
};
use quids_core::decoding::{generate, prepare_for_inference, DecodeMode, GenerationParams};
use quids_core::evaluation::rouge_n_recall;
use quids_core::idna::{augment_dataset, AugmentConfig};
use quids_core::introspect::{distractor_attention_mass, export_generation, Aggregation};
use quids_core::model::ModelConfig;
use quids_core::training::{prepare_training_examples, train, TrainConfig};
use quids_core::{Model, TermFrequencyEmbedder};

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub overlap: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub model: ModelConfig,
    pub beam: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: 200,
            val: 20,
            test: 30,
            overlap: 0.3,
            epochs: 20,
            learning_rate: 3e-3,
            model: ModelConfig {
                max_source_len: 64,
                max_target_len: 16,
                ..ModelConfig::default()
            },
            beam: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub use_dsm: bool,
    pub rouge1: f64,
    pub distractor_rate: f64,
    pub distractor_mass: f64,
    pub elapsed: Duration,
}

fn distractor_topic(s: &quids_core::QuerySample) -> usize {
    s.extra["distractor_topic"].as_u64().unwrap() as usize
}

pub fn corpus(cfg: &ExperimentConfig, seed: u64) -> (Dataset, Dataset, Dataset) {
    let spec = SyntheticSpec {
        overlap: cfg.overlap,
        samples: cfg.train + cfg.val + cfg.test,
        seed,
        ..SyntheticSpec::default()
    };
    let all = generate_synthetic_corpus(&spec).unwrap();
    let mut it = all.samples.into_iter();
    let train = Dataset::new(it.by_ref().take(cfg.train).collect());
    let val = Dataset::new(it.by_ref().take(cfg.val).collect());
    let test = Dataset::new(it.collect());
    (train, val, test)
}

pub fn run(cfg: &ExperimentConfig, seed: u64, use_dsm: bool) -> RunResult {
    let start = Instant::now();
    let (train_set, val, test) = corpus(cfg, seed);
    let embedder = TermFrequencyEmbedder::from_datasets(&[&train_set]);
    let (augmented, _) =
        augment_dataset(&train_set, &embedder, AugmentConfig::default(), 1).unwrap();
    let vocab = build_vocab(&train_set, 10_000).unwrap();
    let examples = prepare_training_examples(&augmented, &vocab, Some(&embedder), true).unwrap();
    let mut model = Model::new(
        ModelConfig {
            seed,
            ..cfg.model.clone()
        },
        vocab,
    )
    .unwrap();
    let tc = TrainConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        seed,
        use_dsm,
        ..TrainConfig::default()
    };
    let params = GenerationParams {
        beam_size: cfg.beam,
        max_length: cfg.model.max_target_len,
        ..GenerationParams::default()
    };
    let outcome = train(&tc, &mut model, &examples, &val, &params).unwrap();
    let model = outcome.best_model;

    let (mut rouge, mut rate, mut rate_n, mut mass) = (0.0, 0.0, 0usize, 0.0);
    for s in &test.samples {
        let prepared = prepare_for_inference(s, model.vocab(), None).unwrap();
        let gen = generate(&model, &prepared, &params, DecodeMode::Auto, true).unwrap();
        rouge += rouge_n_recall(&gen.text, &s.intent, 1);
        let d = distractor_topic(s);
        let topics: Vec<usize> = word_tokens(&gen.text)
            .iter()
            .filter_map(|t| topic_of_token(t))
            .collect();
        if !topics.is_empty() {
            rate += topics.iter().filter(|&&t| t == d).count() as f64 / topics.len() as f64;
            rate_n += 1;
        }
        let record = export_generation(&gen, model.vocab(), Aggregation::default()).unwrap();
        mass += distractor_attention_mass(&record, |t| topic_of_token(t) == Some(d));
    }
    let n = test.len() as f64;
    RunResult {
        seed,
        use_dsm,
        rouge1: rouge / n,
        distractor_rate: if rate_n == 0 {
            0.0
        } else {
            rate / rate_n as f64
        },
        distractor_mass: mass / n,
        elapsed: start.elapsed(),
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}
