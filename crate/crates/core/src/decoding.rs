//! Beam search with a no-repeat n-gram constraint, and intent generation.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autograd::log_softmax;
use crate::corpus::{detokenize, tokenize, QuerySample, Vocabulary};
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::idna::{fuse_relevant, rank_irrelevant};
use crate::model::{DecoderStates, EncoderOutput, IrrelevantInput, Model, PreparedSample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub beam_size: usize,
    /// Upper bound on generated tokens, EOS included.
    pub max_length: usize,
    /// 0 disables the constraint.
    pub no_repeat_ngram: usize,
    /// Finished hypotheses are ranked by `score / length^alpha`.
    pub length_penalty: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_length: 256,
            no_repeat_ngram: 3,
            length_penalty: 0.0,
        }
    }
}

impl GenerationParams {
    pub fn greedy(self) -> Self {
        Self { beam_size: 1, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::arg("beam size must be at least 1"));
        }
        if self.max_length < 2 {
            return Err(Error::arg("max length must be at least 2"));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::arg("length penalty must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// BOS first.
    pub tokens: Vec<u32>,
    /// Cumulative log-probability.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens after BOS.
    pub fn generated(&self) -> &[u32] {
        &self.tokens[1..]
    }

    pub fn normalized_score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.score
        } else {
            self.score / (self.generated().len().max(1) as f64).powf(alpha)
        }
    }
}

/// Next-token log-probabilities for a BOS-prefixed prefix.
pub trait StepScorer {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

impl<F> StepScorer for F
where
    F: FnMut(&[u32]) -> Vec<f64>,
{
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        Ok(self(prefix))
    }
}

/// Tokens that would complete an n-gram already present in `prefix`.
pub fn ban_repeated_ngrams(prefix: &[u32], n: usize) -> BTreeSet<u32> {
    let mut banned = BTreeSet::new();
    if n == 0 || prefix.len() < n {
        return banned;
    }
    let tail = &prefix[prefix.len() + 1 - n..];
    for window in prefix.windows(n) {
        if &window[..n - 1] == tail {
            banned.insert(window[n - 1]);
        }
    }
    banned
}

struct Candidate {
    score: f64,
    token: u32,
    beam: usize,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.token.cmp(&b.token))
        .then(a.beam.cmp(&b.beam))
}

/// Length-synchronous beam search.
///
/// Hypotheses that emit `eos` or reach `max_length` generated tokens are frozen
/// and compete by normalized score. Candidates are ordered by score, then token
/// id, then beam index.
pub fn beam_search(
    scorer: &mut dyn StepScorer,
    params: &GenerationParams,
    bos: u32,
    eos: u32,
) -> Result<Hypothesis> {
    params.validate()?;
    let alpha = params.length_penalty;
    let mut active = vec![Hypothesis {
        tokens: vec![bos],
        score: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 1..=params.max_length {
        if active.is_empty() {
            break;
        }
        if alpha == 0.0 {
            let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_open = active.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_open {
                active.clear();
                break;
            }
        }
        let mut candidates = Vec::new();
        for (beam, h) in active.iter().enumerate() {
            let lp = scorer.log_probs(&h.tokens)?;
            let banned = ban_repeated_ngrams(&h.tokens, params.no_repeat_ngram);
            let before = candidates.len();
            for (token, &l) in lp.iter().enumerate() {
                let token = token as u32;
                if l == f64::NEG_INFINITY || banned.contains(&token) {
                    continue;
                }
                if l.is_nan() {
                    return Err(Error::NonFinite {
                        term: "next-token log-probability".into(),
                    });
                }
                candidates.push(Candidate {
                    score: h.score + l,
                    token,
                    beam,
                });
            }
            if candidates.len() == before && h.tokens.len() > 1 {
                finished.push(Hypothesis { finished: true, ..h.clone() });
            }
        }
        candidates.sort_by(candidate_order);
        let mut next = Vec::with_capacity(params.beam_size);
        for c in candidates.into_iter().take(params.beam_size) {
            let mut tokens = active[c.beam].tokens.clone();
            tokens.push(c.token);
            let done = c.token == eos || step == params.max_length;
            let h = Hypothesis {
                tokens,
                score: c.score,
                finished: done,
            };
            if done {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        active = next;
    }
    finished.extend(active.into_iter().map(|h| Hypothesis { finished: true, ..h }));
    finished
        .into_iter()
        .reduce(|best, h| {
            if h.normalized_score(alpha) > best.normalized_score(alpha) {
                h
            } else {
                best
            }
        })
        .ok_or_else(|| Error::Precondition("every next token is banned".into()))
}

/// Argmax decoding with the same masking and tie-break as [`beam_search`].
pub fn greedy_search(
    scorer: &mut dyn StepScorer,
    params: &GenerationParams,
    bos: u32,
    eos: u32,
) -> Result<Hypothesis> {
    params.validate()?;
    let mut h = Hypothesis {
        tokens: vec![bos],
        score: 0.0,
        finished: false,
    };
    while !h.finished {
        let lp = scorer.log_probs(&h.tokens)?;
        let banned = ban_repeated_ngrams(&h.tokens, params.no_repeat_ngram);
        let best = lp
            .iter()
            .enumerate()
            .filter(|&(t, &l)| l != f64::NEG_INFINITY && !banned.contains(&(t as u32)))
            .fold(None, |best: Option<(usize, f64)>, (t, &l)| match best {
                Some((_, b)) if b >= l => best,
                _ => Some((t, l)),
            });
        let Some((token, l)) = best else {
            if h.tokens.len() == 1 {
                return Err(Error::Precondition("every next token is banned".into()));
            }
            h.finished = true;
            break;
        };
        h.tokens.push(token as u32);
        h.score += l;
        h.finished = token as u32 == eos || h.generated().len() == params.max_length;
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// With the sample's irrelevant document when it has one, null mode otherwise.
    #[default]
    Auto,
    WithIrrelevant,
    NullIrrelevant,
}

impl DecodeMode {
    pub fn label(self) -> &'static str {
        match self {
            DecodeMode::Auto => "auto",
            DecodeMode::WithIrrelevant => "with_irrelevant",
            DecodeMode::NullIrrelevant => "null_irrelevant",
        }
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(DecodeMode::Auto),
            "with_irrelevant" => Ok(DecodeMode::WithIrrelevant),
            "null_irrelevant" => Ok(DecodeMode::NullIrrelevant),
            other => Err(Error::arg(format!("unknown decode mode `{other}`"))),
        }
    }
}

/// Scores next tokens with the model. Specials other than EOS are never emitted.
pub struct ModelScorer<'m> {
    model: &'m Model,
    rel: EncoderOutput,
    irrel: Option<EncoderOutput>,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, rel: EncoderOutput, irrel: Option<EncoderOutput>) -> Self {
        Self { model, rel, irrel }
    }

    fn irrelevant(&self) -> IrrelevantInput<'_> {
        match &self.irrel {
            Some(out) => IrrelevantInput::Encoded(out),
            None => IrrelevantInput::Null,
        }
    }

    pub fn states(&self, prefix: &[u32], capture: bool) -> Result<DecoderStates> {
        self.model.decoder_forward(prefix, &self.rel, self.irrelevant(), capture)
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let states = self.states(prefix, false)?;
        let mut logits = states.logits.row(prefix.len() - 1).to_vec();
        for t in [Vocabulary::PAD, Vocabulary::BOS, Vocabulary::SEP] {
            logits[t as usize] = f64::NEG_INFINITY;
        }
        Ok(log_softmax(&logits))
    }
}

/// Result of decoding one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub id: String,
    pub text: String,
    pub hypothesis: Hypothesis,
    /// Mode actually used (never `Auto`).
    pub mode: DecodeMode,
    pub relevant_input: Vec<u32>,
    pub irrelevant_input: Option<Vec<u32>>,
    /// Decoder pass over the emitted prefix with attention captured.
    pub states: Option<DecoderStates>,
}

/// Decodes one prepared sample. `capture` re-runs the decoder over the output
/// to record cross-attention rows for every emitted token.
pub fn generate(
    model: &Model,
    sample: &PreparedSample,
    params: &GenerationParams,
    mode: DecodeMode,
    capture: bool,
) -> Result<Generation> {
    let mode = match (mode, &sample.negative) {
        (DecodeMode::Auto, Some(_)) => DecodeMode::WithIrrelevant,
        (DecodeMode::Auto, None) => DecodeMode::NullIrrelevant,
        (DecodeMode::WithIrrelevant, None) => {
            return Err(Error::arg(format!(
                "sample `{}` has no irrelevant document for with_irrelevant mode",
                sample.id
            )))
        }
        (m, _) => m,
    };
    let rel = model.encode_pair(&sample.query, &sample.relevant)?;
    let irrel = match (mode, &sample.negative) {
        (DecodeMode::WithIrrelevant, Some(neg)) => {
            Some(model.encode_pair(&sample.query, std::slice::from_ref(neg))?)
        }
        _ => None,
    };
    let params = GenerationParams {
        max_length: params.max_length.min(model.config().max_target_len),
        ..*params
    };
    let relevant_input = rel.tokens.clone();
    let irrelevant_input = irrel.as_ref().map(|o| o.tokens.clone());
    let mut scorer = ModelScorer::new(model, rel, irrel);
    let hypothesis = if params.beam_size == 1 {
        greedy_search(&mut scorer, &params, Vocabulary::BOS, Vocabulary::EOS)?
    } else {
        beam_search(&mut scorer, &params, Vocabulary::BOS, Vocabulary::EOS)?
    };
    let states = if capture {
        let prefix = &hypothesis.tokens[..hypothesis.tokens.len() - 1];
        Some(scorer.states(prefix, true)?)
    } else {
        None
    };
    Ok(Generation {
        id: sample.id.clone(),
        text: detokenize(hypothesis.generated(), model.vocab()),
        hypothesis,
        mode,
        relevant_input,
        irrelevant_input,
        states,
    })
}

fn doc_tokens(text: &str, vocab: &Vocabulary) -> Option<Vec<u32>> {
    let ids = tokenize(text, vocab, false);
    (!ids.is_empty()).then_some(ids)
}

/// Tokenizes a sample for inference.
///
/// Relevant documents keep their stored order. The irrelevant document is the
/// first augmented negative when present, else the original irrelevant
/// document closest to the fused relevant text (or the first one when no
/// embedder is given), else none.
pub fn prepare_for_inference(
    sample: &QuerySample,
    vocab: &Vocabulary,
    embedder: Option<&dyn EmbeddingProvider>,
) -> Result<PreparedSample> {
    let relevant: Vec<Vec<u32>> = sample
        .relevant
        .iter()
        .filter_map(|d| doc_tokens(&d.text, vocab))
        .collect();
    if relevant.is_empty() {
        return Err(Error::Precondition(format!(
            "sample `{}` has no relevant document with known tokens",
            sample.id
        )));
    }
    let negative_text = match (&sample.irrelevant_augmented, embedder) {
        (Some(aug), _) if !aug.is_empty() => Some(aug[0].text.clone()),
        _ if sample.irrelevant.is_empty() => None,
        (_, Some(e)) => {
            let (_, fused) = fuse_relevant(&sample.relevant, e)?;
            rank_irrelevant(sample, &fused, e)?
                .into_iter()
                .next()
                .map(|(d, _)| d.text)
        }
        (_, None) => Some(sample.irrelevant[0].text.clone()),
    };
    Ok(PreparedSample {
        id: sample.id.clone(),
        query: tokenize(&sample.query, vocab, false),
        relevant,
        negative: negative_text.and_then(|t| doc_tokens(&t, vocab)),
        target: tokenize(&sample.intent, vocab, false),
    })
}
