//! Loss terms.
//!
//! Plain functions compute each term from values; the `tape_*` functions build
//! the same terms on an [`autograd::Tape`](crate::autograd::Tape) for training.

use serde::{Deserialize, Serialize};

use crate::autograd::{cosine_value, log_softmax, Matrix, Tape, Var};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

/// Weights of the NLL, encoder-contrastive and decoder-contrastive terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub nll: f64,
    pub encoder: f64,
    pub decoder: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            nll: 0.2,
            encoder: 0.2,
            decoder: 0.6,
        }
    }
}

impl LossWeights {
    pub fn new(nll: f64, encoder: f64, decoder: f64) -> Self {
        Self {
            nll,
            encoder,
            decoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.nll, self.encoder, self.decoder];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::arg(format!("loss weights must be non-negative: {self:?}")));
        }
        if w.iter().all(|v| *v > 0.0) && (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("loss weights must sum to 1: {self:?}")));
        }
        Ok(())
    }

    /// Zeroes the weights of disabled terms without renormalizing the rest.
    pub fn ablated(self, use_rsm: bool, use_dsm: bool) -> Self {
        Self {
            nll: self.nll,
            encoder: if use_rsm { self.encoder } else { 0.0 },
            decoder: if use_dsm { self.decoder } else { 0.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub encoder_rel: f64,
    pub encoder_irrel: f64,
    pub encoder_total: f64,
    pub decoder_infonce: f64,
    pub combined: f64,
}

impl LossBreakdown {
    pub fn check_finite(&self) -> Result<()> {
        let terms = [
            ("nll", self.nll),
            ("encoder_rel", self.encoder_rel),
            ("encoder_irrel", self.encoder_irrel),
            ("decoder_infonce", self.decoder_infonce),
            ("combined", self.combined),
        ];
        match terms.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite {
                term: (*name).into(),
            }),
            None => Ok(()),
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg("embedding dims differ"));
    }
    Ok(1.0 - cosine_value(a, b))
}

/// Sum of pairwise cosine distances between the relevant document embeddings.
pub fn relevant_space_loss(embeddings: &[EmbeddingVector]) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::arg("relevant-space loss needs at least one embedding"));
    }
    let mut total = 0.0;
    for m in 0..embeddings.len() {
        for n in m + 1..embeddings.len() {
            total += distance(embeddings[m].values(), embeddings[n].values())?;
        }
    }
    Ok(total)
}

/// Hinge `Σ max(margin − d(e_m, ē), 0)` pushing the irrelevant embedding away.
pub fn irrelevant_space_loss(
    embeddings: &[EmbeddingVector],
    irrelevant: &EmbeddingVector,
    margin: f64,
) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::arg("irrelevant-space loss needs at least one embedding"));
    }
    if margin <= 0.0 {
        return Err(Error::arg("margin must be positive"));
    }
    embeddings.iter().try_fold(0.0, |acc, e| {
        Ok(acc + (margin - distance(e.values(), irrelevant.values())?).max(0.0))
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Token NLL over positions where `mask` is true.
pub fn nll_loss(logits: &Matrix, targets: &[u32], mask: &[bool], reduction: Reduction) -> Result<f64> {
    if logits.rows() != targets.len() || targets.len() != mask.len() {
        return Err(Error::arg(format!(
            "nll shapes: {} logits rows, {} targets, {} mask entries",
            logits.rows(),
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (z, (&t, &keep)) in targets.iter().zip(mask).enumerate() {
        if !keep {
            continue;
        }
        if t as usize >= logits.cols() {
            return Err(Error::arg(format!("target id {t} outside vocabulary of {}", logits.cols())));
        }
        total -= log_softmax(logits.row(z))[t as usize];
        count += 1;
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean if count > 0 => total / count as f64,
        Reduction::Mean => 0.0,
    })
}

/// InfoNCE between the combined-stream and relevant-stream embeddings against
/// in-batch irrelevant-stream negatives.
///
/// With `include_positive` the positive also appears in the denominator (the
/// usual non-negative form). Without it the denominator holds negatives only,
/// which can yield negative values.
pub fn disentangle_infonce(
    f_c: &[f64],
    f_r: &[f64],
    negatives: &[&[f64]],
    temperature: f64,
    include_positive: bool,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::arg(format!("temperature {temperature} must be positive")));
    }
    if negatives.is_empty() {
        return Err(Error::arg("InfoNCE needs at least one negative"));
    }
    let pos = cosine_value(f_c, f_r) / temperature;
    let mut logits: Vec<f64> = negatives
        .iter()
        .map(|n| cosine_value(f_c, n) / temperature)
        .collect();
    if include_positive {
        logits.push(pos);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// `λ0·nll + λ1·encoder + λ2·decoder`; rejects non-finite parts.
pub fn combined_loss(nll: f64, encoder: f64, decoder: f64, weights: LossWeights) -> Result<f64> {
    for (name, v) in [("nll", nll), ("encoder", encoder), ("decoder", decoder)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    Ok(weights.nll * nll + weights.encoder * encoder + weights.decoder * decoder)
}

pub fn tape_cosine_distance(tape: &mut Tape, a: Var, b: Var) -> Var {
    let c = tape.cosine(a, b);
    let neg = tape.scale(c, -1.0);
    tape.add_const(neg, 1.0)
}

pub fn tape_relevant_space_loss(tape: &mut Tape, embeddings: &[Var]) -> Var {
    let mut terms = Vec::new();
    for m in 0..embeddings.len() {
        for n in m + 1..embeddings.len() {
            terms.push(tape_cosine_distance(tape, embeddings[m], embeddings[n]));
        }
    }
    tape.sum_scalars(&terms)
}

pub fn tape_irrelevant_space_loss(tape: &mut Tape, embeddings: &[Var], irrelevant: Var, margin: f64) -> Var {
    let terms: Vec<Var> = embeddings
        .iter()
        .map(|&e| {
            let d = tape_cosine_distance(tape, e, irrelevant);
            let neg = tape.scale(d, -1.0);
            let slack = tape.add_const(neg, margin);
            tape.relu(slack)
        })
        .collect();
    tape.sum_scalars(&terms)
}

pub fn tape_infonce(
    tape: &mut Tape,
    f_c: Var,
    f_r: Var,
    negatives: &[Var],
    temperature: f64,
    include_positive: bool,
) -> Var {
    let cos_pos = tape.cosine(f_c, f_r);
    let pos = tape.scale(cos_pos, 1.0 / temperature);
    let mut logits: Vec<Var> = negatives
        .iter()
        .map(|&n| {
            let c = tape.cosine(f_c, n);
            tape.scale(c, 1.0 / temperature)
        })
        .collect();
    if include_positive {
        logits.push(pos);
    }
    let row = tape.concat_cols(&logits);
    let lse = tape.logsumexp(row);
    tape.sub(lse, pos)
}
