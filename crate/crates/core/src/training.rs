//! Training loop, checkpoint selection and the finite-difference harness.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::corpus::{tokenize, Dataset, Vocabulary};
use crate::decoding::{generate, prepare_for_inference, DecodeMode, GenerationParams};
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::evaluation::RougeScores;
use crate::idna::{rank_relevant, training_negative_index};
use crate::model::{Cross, Model, PreparedSample, Session};
use crate::objectives::{
    tape_infonce, tape_irrelevant_space_loss, tape_relevant_space_loss, LossBreakdown, LossWeights,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_nll: f64,
    pub lambda_encoder: f64,
    pub lambda_decoder: f64,
    pub margin: f64,
    pub temperature: f64,
    /// Keep the positive pair in the InfoNCE denominator.
    pub include_positive: bool,
    pub use_idna: bool,
    pub use_rsm: bool,
    pub use_dsm: bool,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            epochs: 10,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            seed: 0,
            lambda_nll: w.nll,
            lambda_encoder: w.encoder,
            lambda_decoder: w.decoder,
            margin: 1.0,
            temperature: 0.1,
            include_positive: true,
            use_idna: true,
            use_rsm: true,
            use_dsm: true,
            clip_norm: 1.0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights::new(self.lambda_nll, self.lambda_encoder, self.lambda_decoder)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: self.weights().ablated(self.use_rsm, self.use_dsm),
            margin: self.margin,
            temperature: self.temperature,
            include_positive: self.include_positive,
            use_rsm: self.use_rsm,
            use_dsm: self.use_dsm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::arg("learning rate must be positive"));
        }
        // The anchor's own negative is always in the InfoNCE set, so a batch of
        // one is valid even with the decoder loss on.
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::arg("invalid optimizer moments"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::arg("margin must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::arg("temperature must be positive"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::arg("clip norm must be non-negative"));
        }
        self.weights().validate()
    }
}

/// What the batch loss computes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub margin: f64,
    pub temperature: f64,
    pub include_positive: bool,
    pub use_rsm: bool,
    pub use_dsm: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        TrainConfig::default().loss_config()
    }
}

/// A prepared sample with its candidate negatives in rank order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub sample: PreparedSample,
    pub negatives: Vec<Vec<u32>>,
}

impl TrainingExample {
    fn at_step(&self, epoch: usize, step: usize) -> Option<PreparedSample> {
        if self.negatives.is_empty() {
            return None;
        }
        let i = training_negative_index(self.negatives.len(), epoch, step);
        Some(PreparedSample {
            negative: Some(self.negatives[i].clone()),
            ..self.sample.clone()
        })
    }
}

fn tokens_of(text: &str, vocab: &Vocabulary) -> Option<Vec<u32>> {
    let ids = tokenize(text, vocab, false);
    (!ids.is_empty()).then_some(ids)
}

/// Tokenizes a training set.
///
/// With `use_idna` the negatives are the `irrelevant_augmented` lists (which
/// must be present) and, when an embedder is given, relevant documents are
/// ranked by similarity to `(query; intent)`. Without it the original
/// irrelevant lists and relevant order are used as they are.
pub fn prepare_training_examples(
    dataset: &Dataset,
    vocab: &Vocabulary,
    embedder: Option<&dyn EmbeddingProvider>,
    use_idna: bool,
) -> Result<Vec<TrainingExample>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let relevant_docs = match (use_idna, embedder) {
                (true, Some(e)) => rank_relevant(s, e)?,
                _ => s.relevant.clone(),
            };
            let negative_texts: Vec<&str> = if use_idna {
                s.irrelevant_augmented
                    .as_ref()
                    .ok_or_else(|| {
                        Error::Precondition(format!(
                            "sample `{}` has not been augmented; run augmentation or disable use_idna",
                            s.id
                        ))
                    })?
                    .iter()
                    .map(|d| d.text.as_str())
                    .collect()
            } else {
                s.irrelevant.iter().map(|d| d.text.as_str()).collect()
            };
            let relevant: Vec<Vec<u32>> = relevant_docs.iter().filter_map(|d| tokens_of(&d.text, vocab)).collect();
            if relevant.is_empty() {
                return Err(Error::Precondition(format!(
                    "sample `{}` has no relevant document with known tokens",
                    s.id
                )));
            }
            Ok(TrainingExample {
                sample: PreparedSample {
                    id: s.id.clone(),
                    query: tokenize(&s.query, vocab, false),
                    relevant,
                    negative: None,
                    target: tokenize(&s.intent, vocab, false),
                },
                negatives: negative_texts.iter().filter_map(|t| tokens_of(t, vocab)).collect(),
            })
        })
        .collect()
}

struct BatchVars {
    nll: Var,
    rel: Var,
    irrel: Var,
    infonce: Var,
    combined: Var,
}

fn mean(tape: &mut Tape, terms: &[Var]) -> Var {
    let total = tape.sum_scalars(terms);
    if terms.is_empty() {
        total
    } else {
        tape.scale(total, 1.0 / terms.len() as f64)
    }
}

fn build_batch(s: &mut Session<'_>, model: &Model, batch: &[PreparedSample], cfg: &LossConfig) -> Result<BatchVars> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let mut nll = Vec::new();
    let mut rel = Vec::new();
    let mut irrel = Vec::new();
    let mut dis = Vec::new();
    for sample in batch {
        let negative = sample
            .negative
            .as_ref()
            .ok_or_else(|| Error::arg(format!("sample `{}` has no irrelevant document", sample.id)))?;
        let rel_src = model.build_source(&sample.query, &sample.relevant)?;
        let irr_src = model.build_source(&sample.query, std::slice::from_ref(negative))?;
        let (input, labels) = sample.decoder_io(model.config().max_target_len);
        model.check_tokens(&input)?;
        let enc_r = s.encode(&rel_src);
        let enc_i = s.encode(&irr_src);
        let dec = s.decode(
            &input,
            Cross::Dual {
                rel: enc_r.hidden,
                irrel: Some(enc_i.hidden),
            },
        );
        let targets: Vec<Option<usize>> = labels.iter().map(|&t| Some(t as usize)).collect();
        nll.push(s.tape.cross_entropy(dec.logits, &targets));
        if cfg.use_rsm {
            let reps = s.span_reps(&enc_r);
            let ebar = s.span_reps(&enc_i)[0];
            rel.push(tape_relevant_space_loss(&mut s.tape, &reps));
            irrel.push(tape_irrelevant_space_loss(&mut s.tape, &reps, ebar, cfg.margin));
        }
        if cfg.use_dsm {
            let positions: Vec<usize> = (0..input.len()).collect();
            dis.push(s.disentangled(&dec, &positions));
        }
    }
    let negatives: Vec<Var> = dis.iter().map(|d| d[2]).collect();
    let infonce: Vec<Var> = dis
        .iter()
        .map(|d| tape_infonce(&mut s.tape, d[0], d[1], &negatives, cfg.temperature, cfg.include_positive))
        .collect();
    let t = &mut s.tape;
    let nll = mean(t, &nll);
    let rel = mean(t, &rel);
    let irrel = mean(t, &irrel);
    let infonce = mean(t, &infonce);
    let w = cfg.weights;
    let enc = t.add(rel, irrel);
    let a = t.scale(nll, w.nll);
    let b = t.scale(enc, w.encoder);
    let c = t.scale(infonce, w.decoder);
    let ab = t.add(a, b);
    let combined = t.add(ab, c);
    Ok(BatchVars {
        nll,
        rel,
        irrel,
        infonce,
        combined,
    })
}

fn breakdown(tape: &Tape, v: &BatchVars) -> Result<LossBreakdown> {
    let get = |x: Var| tape.value(x).item();
    let b = LossBreakdown {
        nll: get(v.nll),
        encoder_rel: get(v.rel),
        encoder_irrel: get(v.irrel),
        encoder_total: get(v.rel) + get(v.irrel),
        decoder_infonce: get(v.infonce),
        combined: get(v.combined),
    };
    b.check_finite()?;
    Ok(b)
}

/// Loss terms of one batch, without gradients.
pub fn batch_loss(model: &Model, batch: &[PreparedSample], cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut s = Session::new(model, false);
    let vars = build_batch(&mut s, model, batch, cfg)?;
    breakdown(&s.tape, &vars)
}

/// Loss terms and the gradient of the combined loss for every parameter
/// tensor (zeros where no path reaches it).
pub fn batch_loss_and_grads(
    model: &Model,
    batch: &[PreparedSample],
    cfg: &LossConfig,
    dropout_seed: Option<u64>,
) -> Result<(LossBreakdown, Vec<Matrix>)> {
    let mut s = Session::new(model, true);
    if let Some(seed) = dropout_seed {
        s = s.with_dropout(seed);
    }
    let vars = build_batch(&mut s, model, batch, cfg)?;
    let loss = breakdown(&s.tape, &vars)?;
    let mut grads = s.tape.backward(vars.combined);
    let params = model.params();
    let out = (0..params.len())
        .map(|i| {
            grads.take(s.param_var(i)).unwrap_or_else(|| {
                let t = params.tensor(i);
                Matrix::zeros(t.rows(), t.cols())
            })
        })
        .collect();
    Ok((loss, out))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(model: &Model, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Matrix> = model
            .params()
            .iter()
            .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Matrix]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let params = model.params_mut();
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// One line of the metrics file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub nll: f64,
    pub encoder_rel: f64,
    pub encoder_irrel: f64,
    pub infonce: f64,
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// 1-based.
    pub epoch: usize,
    pub path: Option<PathBuf>,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub mean: f64,
}

/// Highest mean ROUGE; the earliest epoch wins ties.
pub fn select_checkpoint(checkpoints: &[Checkpoint]) -> Result<&Checkpoint> {
    checkpoints
        .iter()
        .reduce(|best, c| if c.mean > best.mean { c } else { best })
        .ok_or_else(|| Error::arg("no checkpoints to select from"))
}

/// Greedy-decodes `val` and averages ROUGE recall against the gold intents.
pub fn validate_model(model: &Model, val: &Dataset, params: &GenerationParams) -> Result<RougeScores> {
    let mut acc = RougeScores::default();
    if val.is_empty() {
        return Ok(acc);
    }
    for s in &val.samples {
        let prepared = prepare_for_inference(s, model.vocab(), None)?;
        let gen = generate(model, &prepared, params, DecodeMode::Auto, false)?;
        let r = RougeScores::compute(&gen.text, &s.intent);
        acc.rouge1 += r.rouge1;
        acc.rouge2 += r.rouge2;
        acc.rouge_l += r.rouge_l;
    }
    let n = val.len() as f64;
    Ok(RougeScores {
        rouge1: acc.rouge1 / n,
        rouge2: acc.rouge2 / n,
        rouge_l: acc.rouge_l / n,
    })
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_MARKER: &str = "best";
pub const MODEL_FILE: &str = "model.json";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_epoch_{epoch}")).join(MODEL_FILE)
}

/// Reads the epoch recorded in a run's `best` marker.
pub fn read_best_marker(dir: &Path) -> Result<usize> {
    let path = dir.join(BEST_MARKER);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.trim()
        .parse()
        .map_err(|_| Error::Checkpoint(format!("{} does not hold an epoch number", path.display())))
}

pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub best_epoch: usize,
    pub best_model: Model,
    pub steps: Vec<StepRecord>,
    /// Samples left out for lack of a negative (decoder loss off only).
    pub skipped: Vec<String>,
}

/// Trains `model` in place; the returned outcome holds the selected snapshot.
pub fn train(
    cfg: &TrainConfig,
    model: &mut Model,
    train_set: &[TrainingExample],
    val: &Dataset,
    generation: &GenerationParams,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let loss_cfg = cfg.loss_config();
    let mut skipped = Vec::new();
    let mut examples = Vec::with_capacity(train_set.len());
    for ex in train_set {
        if !ex.negatives.is_empty() {
            examples.push(ex);
        } else if cfg.use_dsm {
            return Err(Error::Precondition(format!(
                "training sample `{}` has no irrelevant document",
                ex.sample.id
            )));
        } else {
            log::warn!("skipping `{}`: no irrelevant document", ex.sample.id);
            skipped.push(ex.sample.id.clone());
        }
    }
    if examples.is_empty() {
        return Err(Error::Precondition("no usable training samples".into()));
    }
    let validation = GenerationParams {
        beam_size: 1,
        ..*generation
    };

    let mut metrics = match &cfg.checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut steps = Vec::new();
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreparedSample> = chunk
                .iter()
                .map(|&i| examples[i].at_step(epoch - 1, step).expect("negatives checked above"))
                .collect();
            let dropout_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64);
            let (loss, mut grads) = batch_loss_and_grads(model, &batch, &loss_cfg, Some(dropout_seed))?;
            clip_gradients(&mut grads, cfg.clip_norm);
            adam.step(model, &grads);
            step += 1;
            let rec = StepRecord {
                step,
                epoch,
                nll: loss.nll,
                encoder_rel: loss.encoder_rel,
                encoder_irrel: loss.encoder_irrel,
                infonce: loss.decoder_infonce,
                combined: loss.combined,
            };
            if let Some((file, path)) = metrics.as_mut() {
                writeln!(file, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&*path, e))?;
            }
            steps.push(rec);
        }

        let r = validate_model(model, val, &validation)?;
        let path = match &cfg.checkpoint_dir {
            Some(dir) => {
                let path = checkpoint_path(dir, epoch);
                let parent = path.parent().expect("checkpoint has a directory");
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                model.save(&path)?;
                Some(path)
            }
            None => None,
        };
        let ckpt = Checkpoint {
            epoch,
            path,
            rouge1: r.rouge1,
            rouge2: r.rouge2,
            rouge_l: r.rouge_l,
            mean: r.mean(),
        };
        log::info!(
            "epoch {epoch}: rouge1 {:.4} rouge2 {:.4} rougeL {:.4}",
            ckpt.rouge1,
            ckpt.rouge2,
            ckpt.rouge_l
        );
        if best.as_ref().is_none_or(|(m, _)| ckpt.mean > *m) {
            best = Some((ckpt.mean, model.clone()));
        }
        checkpoints.push(ckpt);
    }
    let best_epoch = select_checkpoint(&checkpoints)?.epoch;
    if let Some(dir) = &cfg.checkpoint_dir {
        // Paths relative to the run directory keep the summary relocatable.
        let relative: Vec<Checkpoint> = checkpoints
            .iter()
            .map(|c| Checkpoint {
                path: c.path.as_ref().and_then(|p| p.strip_prefix(dir).ok()).map(Path::to_path_buf),
                ..c.clone()
            })
            .collect();
        let summary = dir.join("checkpoints.json");
        fs::write(&summary, serde_json::to_vec_pretty(&relative)?).map_err(|e| Error::io(&summary, e))?;
        let marker = dir.join(BEST_MARKER);
        fs::write(&marker, format!("{best_epoch}\n")).map_err(|e| Error::io(&marker, e))?;
    }
    Ok(TrainOutcome {
        checkpoints,
        best_epoch,
        best_model: best.expect("at least one epoch").1,
        steps,
        skipped,
    })
}

/// Worst disagreement between analytic and finite-difference gradients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Denominator floor for the relative error, so entries whose true gradient is
/// zero are judged by absolute error instead of by round-off ratios.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares `analytic` against central differences of the combined loss for
/// every parameter element.
pub fn check_gradients(
    model: &Model,
    batch: &[PreparedSample],
    cfg: &LossConfig,
    eps: f64,
    analytic: &[Matrix],
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::arg("eps must be positive"));
    }
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        parameter: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for p in 0..model.params().len() {
        for j in 0..model.params().tensor(p).data().len() {
            let orig = model.params().tensor(p).data()[j];
            probe.params_mut().tensor_mut(p).data_mut()[j] = orig + eps;
            let plus = batch_loss(&probe, batch, cfg)?.combined;
            probe.params_mut().tensor_mut(p).data_mut()[j] = orig - eps;
            let minus = batch_loss(&probe, batch, cfg)?.combined;
            probe.params_mut().tensor_mut(p).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p].data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.parameter.is_empty() {
                report = GradCheckReport {
                    max_relative_error: err,
                    parameter: model.params().name(p).to_string(),
                    index: j,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

/// Analytic gradients from the tape checked against central differences.
pub fn finite_difference_gradcheck(
    model: &Model,
    batch: &[PreparedSample],
    cfg: &LossConfig,
    eps: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = batch_loss_and_grads(model, batch, cfg, None)?;
    check_gradients(model, batch, cfg, eps, &grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(epoch: usize, mean: f64) -> Checkpoint {
        Checkpoint {
            epoch,
            path: None,
            rouge1: mean,
            rouge2: mean,
            rouge_l: mean,
            mean,
        }
    }

    #[test]
    fn checkpoint_selection() {
        let c = [ckpt(1, 0.20), ckpt(2, 0.35), ckpt(3, 0.30)];
        assert_eq!(select_checkpoint(&c).unwrap().epoch, 2);
        let c = [ckpt(1, 0.3), ckpt(2, 0.3), ckpt(3, 0.3)];
        assert_eq!(select_checkpoint(&c).unwrap().epoch, 1);
        assert_eq!(select_checkpoint(&c[2..]).unwrap().epoch, 3);
        assert!(select_checkpoint(&[]).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![Matrix::row_vector(vec![3.0, 4.0])];
        assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut g = vec![Matrix::row_vector(vec![0.3, 0.4])];
        clip_gradients(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda_nll: 0.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        let off = TrainConfig {
            use_rsm: false,
            ..TrainConfig::default()
        };
        assert_eq!(off.loss_config().weights, LossWeights::new(0.2, 0.0, 0.6));
    }
}
