mod common;

use quids_core::corpus::{build_vocab, generate_synthetic_corpus, Dataset, SyntheticSpec};
use quids_core::decoding::GenerationParams;
use quids_core::idna::{augment_dataset, AugmentConfig};
use quids_core::model::{IrrelevantInput, ModelConfig};
use quids_core::training::{
    batch_loss, batch_loss_and_grads, check_gradients, prepare_training_examples, train, Adam, LossConfig,
    TrainConfig,
};
use quids_core::{LossWeights, Model, TermFrequencyEmbedder};

fn names_with_grad(model: &Model, grads: &[quids_core::Matrix]) -> Vec<String> {
    (0..grads.len())
        .filter(|&i| grads[i].data().iter().any(|g| *g != 0.0))
        .map(|i| model.params().name(i).to_string())
        .collect()
}

#[test]
fn ablations_zero_their_terms() {
    let model = common::tiny_model(1);
    let batch = common::random_batch(2, 3, 64);
    let full = batch_loss(&model, &batch, &LossConfig::default()).unwrap();
    assert!(full.decoder_infonce > 0.0 && full.encoder_total > 0.0);

    let no_dsm = LossConfig {
        use_dsm: false,
        ..LossConfig::default()
    };
    let l = batch_loss(&model, &batch, &no_dsm).unwrap();
    assert_eq!(l.decoder_infonce, 0.0);
    assert_eq!(l.nll, full.nll);
    assert!((l.combined - (0.2 * l.nll + 0.2 * l.encoder_total)).abs() < 1e-12);
    let (_, grads) = batch_loss_and_grads(&model, &batch, &no_dsm, None).unwrap();
    let touched = names_with_grad(&model, &grads);
    for name in model.disentangle_param_names() {
        assert!(!touched.iter().any(|t| t == name), "{name} has gradient without DSM");
    }
}

#[test]
fn without_rsm_representation_params_stay_put() {
    let mut model = common::tiny_model(3);
    let batch = common::random_batch(4, 2, 64);
    let cfg = LossConfig {
        use_rsm: false,
        ..LossConfig::default()
    };
    let before: Vec<_> = model
        .representation_param_names()
        .iter()
        .map(|n| model.params().get(n).unwrap().clone())
        .collect();
    let mut adam = Adam::new(&model, 1e-2, 0.9, 0.999, 1e-8);
    for _ in 0..3 {
        let (l, grads) = batch_loss_and_grads(&model, &batch, &cfg, None).unwrap();
        assert_eq!(l.encoder_total, 0.0);
        adam.step(&mut model, &grads);
    }
    for (name, old) in model.representation_param_names().iter().zip(&before) {
        assert_eq!(model.params().get(name).unwrap(), old, "{name} moved");
    }
}

#[test]
fn nll_only_gradients_match_finite_differences() {
    let model = common::tiny_model(5);
    let batch = common::random_batch(6, 1, 64);
    let cfg = LossConfig {
        weights: LossWeights::new(1.0, 0.0, 0.0),
        ..LossConfig::default()
    };
    let (_, grads) = batch_loss_and_grads(&model, &batch, &cfg, None).unwrap();
    let report = check_gradients(&model, &batch, &cfg, 1e-5, &grads).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn corrupted_gradient_is_reported_by_name() {
    let model = common::tiny_model(7);
    let batch = common::random_batch(8, 1, 64);
    let cfg = LossConfig::default();
    let (_, mut grads) = batch_loss_and_grads(&model, &batch, &cfg, None).unwrap();
    let target = (0..grads.len())
        .find(|&i| model.params().name(i) == "dec.1.cross_rel.wq")
        .expect("parameter exists");
    grads[target].data_mut()[3] += 0.5;
    let report = check_gradients(&model, &batch, &cfg, 1e-5, &grads).unwrap();
    assert!(!report.passes(1e-4));
    assert_eq!(report.parameter, "dec.1.cross_rel.wq");
    assert_eq!(report.index, 3);
}

#[test]
fn decoder_is_causal() {
    let model = common::tiny_model(9);
    let batch = common::random_batch(10, 1, 64);
    let s = &batch[0];
    let rel = model.encode_pair(&s.query, &s.relevant).unwrap();
    let (prefix, _) = s.decoder_io(16);
    let a = model.decoder_forward(&prefix, &rel, IrrelevantInput::Null, false).unwrap();
    let mut changed = prefix.clone();
    *changed.last_mut().unwrap() = if prefix[prefix.len() - 1] == 10 { 11 } else { 10 };
    let b = model.decoder_forward(&changed, &rel, IrrelevantInput::Null, false).unwrap();
    let last = prefix.len() - 1;
    for z in 0..last {
        assert_eq!(a.logits.row(z), b.logits.row(z), "position {z} saw the future");
    }
    assert_ne!(a.logits.row(last), b.logits.row(last));
}

#[test]
fn training_is_deterministic() {
    let spec = SyntheticSpec {
        samples: 8,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let all = generate_synthetic_corpus(&spec).unwrap();
    let train_set = Dataset::new(all.samples[..5].to_vec());
    let val = Dataset::new(all.samples[5..].to_vec());
    let embedder = TermFrequencyEmbedder::from_datasets(&[&train_set]);
    let (aug, _) = augment_dataset(&train_set, &embedder, AugmentConfig::default(), 2).unwrap();
    let vocab = build_vocab(&train_set, 300).unwrap();
    let examples = prepare_training_examples(&aug, &vocab, Some(&embedder), true).unwrap();
    let run = || {
        let cfg = ModelConfig {
            max_source_len: 64,
            dropout: 0.1,
            seed: 4,
            ..ModelConfig::tiny(0)
        };
        let mut model = Model::new(cfg, vocab.clone()).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let out = train(&tc, &mut model, &examples, &val, &GenerationParams::default().greedy()).unwrap();
        (out.steps, out.best_epoch, model)
    };
    let (s1, e1, m1) = run();
    let (s2, e2, m2) = run();
    assert_eq!(s1, s2);
    assert_eq!(e1, e2);
    assert_eq!(m1.params().iter().collect::<Vec<_>>(), m2.params().iter().collect::<Vec<_>>());
}

#[test]
fn combined_loss_falls_over_ten_epochs() {
    use common::experiment::{corpus, median, ExperimentConfig};
    let cfg = ExperimentConfig {
        val: 5,
        ..ExperimentConfig::default()
    };
    let mut first = Vec::new();
    let mut tenth = Vec::new();
    for seed in [1u64, 2, 3] {
        let (train_set, val, _) = corpus(&cfg, seed);
        let embedder = TermFrequencyEmbedder::from_datasets(&[&train_set]);
        let (aug, _) = augment_dataset(&train_set, &embedder, AugmentConfig::default(), 4).unwrap();
        let vocab = build_vocab(&train_set, 10_000).unwrap();
        let examples = prepare_training_examples(&aug, &vocab, Some(&embedder), true).unwrap();
        let mut model = Model::new(ModelConfig { seed, ..cfg.model.clone() }, vocab).unwrap();
        let tc = TrainConfig {
            epochs: 10,
            seed,
            ..TrainConfig::default()
        };
        let params = GenerationParams {
            max_length: 16,
            ..GenerationParams::default()
        }
        .greedy();
        let out = train(&tc, &mut model, &examples, &val, &params).unwrap();
        let epoch_mean = |e: usize| {
            let s: Vec<f64> = out.steps.iter().filter(|r| r.epoch == e).map(|r| r.combined).collect();
            s.iter().sum::<f64>() / s.len() as f64
        };
        let epochs: Vec<usize> = out.steps.iter().map(|r| r.epoch).collect();
        let (lo, hi) = (*epochs.iter().min().unwrap(), *epochs.iter().max().unwrap());
        first.push(epoch_mean(lo));
        tenth.push(epoch_mean(hi));
    }
    let (a, b) = (median(first), median(tenth));
    assert!(b < a, "median combined loss epoch 10 {b} vs epoch 1 {a}");
}
