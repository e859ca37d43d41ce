use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use quids_bench::fixture;
use quids_core::decoding::{generate, DecodeMode, GenerationParams};
use quids_core::evaluation::{rouge_l_recall, rouge_n_recall};
use quids_core::idna::{augment_dataset, AugmentConfig};
use quids_core::training::{batch_loss_and_grads, LossConfig};
use quids_core::TermFrequencyEmbedder;

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(10);
    for d in [32, 64] {
        let f = fixture(8, d);
        group.bench_with_input(BenchmarkId::new("batch8", d), &f, |b, f| {
            b.iter(|| batch_loss_and_grads(&f.model, black_box(&f.batch), &LossConfig::default(), None).unwrap())
        });
    }
    group.finish();
}

fn beam_search(c: &mut Criterion) {
    let f = fixture(4, 64);
    let mut group = c.benchmark_group("generate");
    group.sample_size(10);
    for beam in [1, 4] {
        let params = GenerationParams {
            beam_size: beam,
            max_length: 16,
            ..GenerationParams::default()
        };
        group.bench_with_input(BenchmarkId::new("beam", beam), &params, |b, p| {
            b.iter(|| generate(&f.model, black_box(&f.batch[0]), p, DecodeMode::Auto, false).unwrap())
        });
    }
    group.finish();
}

fn rouge(c: &mut Criterion) {
    let f = fixture(2, 16);
    let reference = &f.dataset.samples[0].intent;
    let candidate = &f.dataset.samples[1].intent;
    c.bench_function("rouge_1_2_l", |b| {
        b.iter(|| {
            rouge_n_recall(black_box(candidate), reference, 1)
                + rouge_n_recall(candidate, reference, 2)
                + rouge_l_recall(candidate, reference)
        })
    });
}

fn augmentation(c: &mut Criterion) {
    let f = fixture(100, 16);
    let embedder = TermFrequencyEmbedder::from_datasets(&[&f.dataset]);
    let mut group = c.benchmark_group("augment");
    group.sample_size(10);
    group.bench_function("100_samples", |b| {
        b.iter(|| augment_dataset(black_box(&f.dataset), &embedder, AugmentConfig::default(), 1).unwrap())
    });
    group.finish();
}

criterion_group!(benches, forward_backward, beam_search, rouge, augmentation);
criterion_main!(benches);
