use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use quids_core::corpus::{build_vocab, generate_synthetic_corpus, load_dataset, save_dataset, split_dataset, SyntheticSpec};
use quids_core::decoding::{generate, prepare_for_inference, Generation, GenerationParams};
use quids_core::evaluation::evaluate_dataset;
use quids_core::idna::augment_dataset;
use quids_core::introspect::{export_generation, render_attention, Aggregation, HeadPolicy};
use quids_core::model::PreparedSample;
use quids_core::training::{
    checkpoint_path, finite_difference_gradcheck, prepare_training_examples, read_best_marker, train, LossConfig,
};
use quids_core::{Dataset, Model, ModelConfig, Provenance};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::manifest::{manifest_for_file, write_atomic, RunManifest};
use crate::{Cli, Command};

/// Argument problems found after parsing; exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if cli.workers == 0 {
        return Err(UsageError("--workers must be at least 1".into()).into());
    }
    let started = Instant::now();
    let workers = cli.workers;
    match cli.command {
        Command::Synth { out, seed } => {
            if let Some(seed) = seed {
                config.synth.seed = seed;
            }
            synth(&config, &out, started)
        }
        Command::Augment { input, out } => augment(&config, &input, &out, workers, started),
        Command::Train {
            train_set,
            val,
            out,
            epochs,
            seed,
            no_idna,
            no_rsm,
            no_dsm,
        } => {
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            if let Some(s) = seed {
                config.train.seed = s;
                config.model.seed = s;
            }
            config.train.use_idna &= !no_idna;
            config.train.use_rsm &= !no_rsm;
            config.train.use_dsm &= !no_dsm;
            config.train.checkpoint_dir = Some(out.clone());
            train_command(&config, &train_set, &val, &out, started)
        }
        Command::Generate {
            checkpoint,
            dataset,
            mode,
            beam,
            max_length,
            no_repeat_ngram,
            out,
        } => {
            let g = &mut config.generate;
            g.mode = mode.unwrap_or(g.mode);
            g.beam_size = beam.unwrap_or(g.beam_size);
            g.max_length = max_length.unwrap_or(g.max_length);
            g.no_repeat_ngram = no_repeat_ngram.unwrap_or(g.no_repeat_ngram);
            generate_command(&config, &checkpoint, &dataset, &out, workers, started)
        }
        Command::Evaluate {
            predictions,
            dataset,
            group_by,
            out,
        } => evaluate(&config, &predictions, &dataset, group_by, &out, started),
        Command::Inspect {
            checkpoint,
            dataset,
            sample_id,
            mode,
            token,
            layer,
            head,
            out_dir,
        } => {
            config.generate.mode = mode;
            let aggregation = Aggregation {
                layer,
                heads: head.map_or(HeadPolicy::Mean, HeadPolicy::Head),
            };
            inspect(&config, &checkpoint, &dataset, &sample_id, &token, aggregation, &out_dir, started)
        }
        Command::Gradcheck {
            seed,
            eps,
            tolerance,
            out,
        } => gradcheck(&config, seed, eps, tolerance, &out, started),
    }
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn synth(config: &Config, out: &Path, started: Instant) -> Result<ExitCode> {
    let split = &config.split;
    let corpus = generate_synthetic_corpus(&config.synth)?;
    let (train_set, val, test) = split_dataset(&corpus, (split.train, split.val, split.test), config.synth.seed)?;
    let mut manifest = RunManifest::new("synth", config, config.synth.seed);
    for (name, d) in [("train", &train_set), ("val", &val), ("test", &test)] {
        let path = out.join(format!("{name}.jsonl"));
        save_dataset(d, &path)?;
        manifest.outputs.push(path);
    }
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        train_set.len(),
        val.len(),
        test.len(),
        out.display()
    );
    manifest.write(&out.join("manifest.json"), started)?;
    Ok(ExitCode::SUCCESS)
}

fn augment(config: &Config, input: &Path, out: &Path, workers: usize, started: Instant) -> Result<ExitCode> {
    let dataset = load(input)?;
    let embedder = config.embedding.build(&[&dataset])?;
    let (augmented, results) = augment_dataset(&dataset, embedder.as_ref(), config.augment, workers)?;
    save_dataset(&augmented, out)?;
    let mut counts: HashMap<Provenance, usize> = HashMap::new();
    for n in results.iter().flat_map(|r| &r.negatives) {
        *counts.entry(n.provenance).or_default() += 1;
    }
    println!(
        "augmented {} samples: {} original, {} mined above threshold, {} fallback",
        augmented.len(),
        counts.get(&Provenance::Original).unwrap_or(&0),
        counts.get(&Provenance::MinedAboveThreshold).unwrap_or(&0),
        counts.get(&Provenance::MinedFallback).unwrap_or(&0)
    );
    let mut manifest = RunManifest::new("augment", config, 0);
    manifest.inputs.push(input.to_path_buf());
    manifest.outputs.push(out.to_path_buf());
    manifest.write(&manifest_for_file(out), started)?;
    Ok(ExitCode::SUCCESS)
}

fn train_command(config: &Config, train_path: &Path, val_path: &Path, out: &Path, started: Instant) -> Result<ExitCode> {
    let train_set = load(train_path)?;
    let val = load(val_path)?;
    let vocab = build_vocab(&train_set, config.vocab.max_size)?;
    let embedder = config.embedding.build(&[&train_set])?;
    let examples = prepare_training_examples(&train_set, &vocab, Some(embedder.as_ref()), config.train.use_idna)?;
    let mut model = Model::new(config.model.clone(), vocab)?;
    let outcome = train(&config.train, &mut model, &examples, &val, &config.generate.params())?;
    let best = outcome
        .checkpoints
        .iter()
        .find(|c| c.epoch == outcome.best_epoch)
        .expect("best epoch is one of the checkpoints");
    println!(
        "trained {} epochs over {} samples ({} skipped); best epoch {} with validation ROUGE-1 {:.4}",
        outcome.checkpoints.len(),
        examples.len(),
        outcome.skipped.len(),
        best.epoch,
        best.rouge1
    );
    let mut manifest = RunManifest::new("train", config, config.train.seed);
    manifest.inputs.extend([train_path.to_path_buf(), val_path.to_path_buf()]);
    manifest.outputs.push(out.to_path_buf());
    manifest.write(&out.join("manifest.json"), started)?;
    Ok(ExitCode::SUCCESS)
}

fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        let epoch = read_best_marker(path)?;
        Ok(checkpoint_path(path, epoch))
    } else {
        Ok(path.to_path_buf())
    }
}

fn load_model(path: &Path) -> Result<(Model, PathBuf)> {
    let resolved = resolve_checkpoint(path)?;
    let model = Model::load(&resolved).with_context(|| format!("loading checkpoint {}", resolved.display()))?;
    Ok((model, resolved))
}

fn prepare_all(model: &Model, config: &Config, dataset: &Dataset) -> Result<Vec<PreparedSample>> {
    let embedder = config.embedding.build(&[dataset])?;
    dataset
        .samples
        .iter()
        .map(|s| Ok(prepare_for_inference(s, model.vocab(), Some(embedder.as_ref()))?))
        .collect()
}

/// Decodes every sample, splitting the work over `workers` threads. The
/// result order follows the input order.
fn decode_all(
    model: &Model,
    samples: &[PreparedSample],
    params: &GenerationParams,
    config: &Config,
    workers: usize,
) -> Result<Vec<Generation>> {
    let mode = config.generate.mode;
    if workers <= 1 || samples.len() < 2 {
        return samples
            .iter()
            .map(|s| Ok(generate(model, s, params, mode, false)?))
            .collect();
    }
    let chunk = samples.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| generate(model, s, params, mode, false))
                        .collect::<quids_core::Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("decoding thread panicked")?);
        }
        Ok(out)
    })
}

#[derive(Serialize, Deserialize)]
struct Prediction {
    id: String,
    intent: String,
    score: f64,
}

fn generate_command(
    config: &Config,
    checkpoint: &Path,
    dataset_path: &Path,
    out: &Path,
    workers: usize,
    started: Instant,
) -> Result<ExitCode> {
    let params = config.generate.params();
    params.validate().map_err(|e| UsageError(e.to_string()))?;
    let (model, resolved) = load_model(checkpoint)?;
    let dataset = load(dataset_path)?;
    let samples = prepare_all(&model, config, &dataset)?;
    let generations = decode_all(&model, &samples, &params, config, workers)?;
    let mut text = String::new();
    for g in &generations {
        let p = Prediction {
            id: g.id.clone(),
            intent: g.text.clone(),
            score: g.hypothesis.score,
        };
        text.push_str(&serde_json::to_string(&p)?);
        text.push('\n');
    }
    write_atomic(out, text.as_bytes())?;
    println!("wrote {} predictions to {}", generations.len(), out.display());
    let mut manifest = RunManifest::new("generate", config, config.model.seed);
    manifest.inputs.extend([resolved, dataset_path.to_path_buf()]);
    manifest.outputs.push(out.to_path_buf());
    manifest.write(&manifest_for_file(out), started)?;
    Ok(ExitCode::SUCCESS)
}

fn read_predictions(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: Prediction =
            serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        if out.insert(p.id.clone(), p.intent).is_some() {
            bail!("{} line {}: duplicate prediction for `{}`", path.display(), i + 1, p.id);
        }
    }
    Ok(out)
}

fn evaluate(
    config: &Config,
    predictions_path: &Path,
    dataset_path: &Path,
    group_by: quids_core::evaluation::GroupBy,
    out: &Path,
    started: Instant,
) -> Result<ExitCode> {
    let predictions = read_predictions(predictions_path)?;
    let dataset = load(dataset_path)?;
    let report = evaluate_dataset(&predictions, &dataset)?;
    let groups = report.groups(group_by);
    let body = serde_json::json!({
        "group_by": group_by,
        "overall": report.overall,
        "groups": groups,
        "rows": report.rows,
    });
    let mut bytes = serde_json::to_vec_pretty(&body)?;
    bytes.push(b'\n');
    write_atomic(out, &bytes)?;
    let o = report.overall;
    println!(
        "{} samples: ROUGE-1 {:.4}  ROUGE-2 {:.4}  ROUGE-L {:.4}",
        o.count, o.rouge1, o.rouge2, o.rouge_l
    );
    for (name, g) in &groups {
        println!(
            "  {name:<14} n={:<4} ROUGE-1 {:.4}  ROUGE-2 {:.4}  ROUGE-L {:.4}",
            g.count, g.rouge1, g.rouge2, g.rouge_l
        );
    }
    let mut manifest = RunManifest::new("evaluate", config, 0);
    manifest.inputs.extend([predictions_path.to_path_buf(), dataset_path.to_path_buf()]);
    manifest.outputs.push(out.to_path_buf());
    manifest.write(&manifest_for_file(out), started)?;
    Ok(ExitCode::SUCCESS)
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn inspect(
    config: &Config,
    checkpoint: &Path,
    dataset_path: &Path,
    sample_id: &str,
    token: &str,
    aggregation: Aggregation,
    out_dir: &Path,
    started: Instant,
) -> Result<ExitCode> {
    let (model, resolved) = load_model(checkpoint)?;
    let dataset = load(dataset_path)?;
    let Some(sample) = dataset.get(sample_id) else {
        bail!("sample `{sample_id}` is not in {}", dataset_path.display());
    };
    let embedder = config.embedding.build(&[&dataset])?;
    let prepared = prepare_for_inference(sample, model.vocab(), Some(embedder.as_ref()))?;
    let params = config.generate.params();
    let generation = generate(&model, &prepared, &params, config.generate.mode, true)?;
    let record = export_generation(&generation, model.vocab(), aggregation)?;
    let focus = match token.parse::<usize>() {
        Ok(i) => i,
        Err(_) => record
            .generated_tokens
            .iter()
            .position(|t| t == token)
            .with_context(|| format!("token `{token}` not in the generated intent `{}`", generation.text))?,
    };
    let svg = render_attention(&record, focus)?;
    let stem = file_safe(sample_id);
    let svg_path = out_dir.join(format!("{stem}_token{focus}.svg"));
    let json_path = out_dir.join(format!("{stem}.attention.json"));
    write_atomic(&svg_path, svg.as_bytes())?;
    let mut bytes = serde_json::to_vec_pretty(&record)?;
    bytes.push(b'\n');
    write_atomic(&json_path, &bytes)?;
    println!(
        "`{}` ({}): token {focus} `{}` -> {}",
        generation.text,
        record.mode.label(),
        record.generated_tokens[focus],
        svg_path.display()
    );
    let mut manifest = RunManifest::new("inspect", config, config.model.seed);
    manifest.inputs.extend([resolved, dataset_path.to_path_buf()]);
    manifest.outputs.extend([svg_path, json_path]);
    manifest.write(&out_dir.join("manifest.json"), started)?;
    Ok(ExitCode::SUCCESS)
}

/// Two synthetic samples on a tiny model; every parameter element is checked.
fn gradcheck(config: &Config, seed: u64, eps: f64, tolerance: f64, out: &Path, started: Instant) -> Result<ExitCode> {
    if eps.is_nan() || eps <= 0.0 || tolerance.is_nan() || tolerance <= 0.0 {
        return Err(UsageError("--eps and --tolerance must be positive".into()).into());
    }
    let spec = SyntheticSpec {
        topics: 2,
        topic_vocab: 8,
        doc_length: 6,
        samples: 2,
        seed,
        ..SyntheticSpec::default()
    };
    let dataset = generate_synthetic_corpus(&spec)?;
    let vocab = build_vocab(&dataset, 1000)?;
    let examples = prepare_training_examples(&dataset, &vocab, None, false)?;
    let batch: Vec<PreparedSample> = examples
        .into_iter()
        .map(|e| PreparedSample {
            negative: e.negatives.first().cloned(),
            ..e.sample
        })
        .collect();
    let model_config = ModelConfig {
        max_source_len: 64,
        seed,
        ..ModelConfig::tiny(0)
    };
    let model = Model::new(model_config, vocab)?;
    let report = finite_difference_gradcheck(&model, &batch, &LossConfig::default(), eps)?;
    let pass = report.passes(tolerance);
    println!(
        "max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}) over {} elements: {}",
        report.max_relative_error,
        report.parameter,
        report.index,
        report.analytic,
        report.numeric,
        report.checked,
        if pass { "PASS" } else { "FAIL" }
    );
    let mut bytes = serde_json::to_vec_pretty(&serde_json::json!({
        "report": report,
        "eps": eps,
        "tolerance": tolerance,
        "pass": pass,
    }))?;
    bytes.push(b'\n');
    write_atomic(out, &bytes)?;
    let mut manifest = RunManifest::new("gradcheck", config, seed);
    manifest.outputs.push(out.to_path_buf());
    manifest.write(&manifest_for_file(out), started)?;
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
