//! ROUGE recall, grouped reports and the weighted judge score.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{word_tokens, Dataset, QuerySample, Source};
use crate::error::{Error, Result};

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches over the reference n-gram count; 0 when the
/// reference has no n-grams.
pub fn rouge_n_recall(candidate: &str, reference: &str, n: usize) -> f64 {
    rouge_n_recall_tokens(&word_tokens(candidate), &word_tokens(reference), n)
}

pub fn rouge_n_recall_tokens(candidate: &[String], reference: &[String], n: usize) -> f64 {
    let reference = ngram_counts(reference, n);
    let total: usize = reference.values().sum();
    if total == 0 {
        return 0.0;
    }
    let candidate = ngram_counts(candidate, n);
    let matched: usize = reference
        .iter()
        .map(|(g, &c)| c.min(candidate.get(g).copied().unwrap_or(0)))
        .sum();
    matched as f64 / total as f64
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS length over the reference length; 0 for an empty reference.
pub fn rouge_l_recall(candidate: &str, reference: &str) -> f64 {
    rouge_l_recall_tokens(&word_tokens(candidate), &word_tokens(reference))
}

pub fn rouge_l_recall_tokens(candidate: &[String], reference: &[String]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    lcs_len(candidate, reference) as f64 / reference.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

impl RougeScores {
    pub fn compute(candidate: &str, reference: &str) -> Self {
        let (c, r) = (word_tokens(candidate), word_tokens(reference));
        Self {
            rouge1: rouge_n_recall_tokens(&c, &r, 1),
            rouge2: rouge_n_recall_tokens(&c, &r, 2),
            rouge_l: rouge_l_recall_tokens(&c, &r),
        }
    }

    pub fn mean(&self) -> f64 {
        (self.rouge1 + self.rouge2 + self.rouge_l) / 3.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentType {
    Informational,
    Exploratory,
}

impl IntentType {
    pub fn from_source(source: Source) -> Option<Self> {
        match source {
            Source::Trec => Some(IntentType::Exploratory),
            Source::Semeval => Some(IntentType::Informational),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            IntentType::Informational => "informational",
            IntentType::Exploratory => "exploratory",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthBucket {
    Short,
    Medium,
    Long,
}

impl LengthBucket {
    /// `< 512` short, `512..=1024` medium, `> 1024` long.
    pub fn from_tokens(n: usize) -> Self {
        match n {
            0..=511 => LengthBucket::Short,
            512..=1024 => LengthBucket::Medium,
            _ => LengthBucket::Long,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LengthBucket::Short => "short",
            LengthBucket::Medium => "medium",
            LengthBucket::Long => "long",
        }
    }
}

/// Word tokens across all relevant documents of a sample.
pub fn relevant_token_length(sample: &QuerySample) -> usize {
    sample.relevant.iter().map(|d| word_tokens(&d.text).len()).sum()
}

/// Extra per-sample metrics (for example a learned similarity score).
pub trait TextMetric: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, candidate: &str, reference: &str, sample: &QuerySample) -> Result<BTreeMap<String, f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    #[serde(flatten)]
    pub scores: RougeScores,
    pub intent_type: Option<IntentType>,
    pub length_bucket: LengthBucket,
    pub relevant_tokens: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub mean: f64,
}

impl Aggregate {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a SampleRow>) -> Self {
        let mut agg = Aggregate::default();
        for r in rows {
            agg.count += 1;
            agg.rouge1 += r.scores.rouge1;
            agg.rouge2 += r.scores.rouge2;
            agg.rouge_l += r.scores.rouge_l;
        }
        if agg.count > 0 {
            let n = agg.count as f64;
            agg.rouge1 /= n;
            agg.rouge2 /= n;
            agg.rouge_l /= n;
            agg.mean = (agg.rouge1 + agg.rouge2 + agg.rouge_l) / 3.0;
        }
        agg
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    #[default]
    None,
    IntentType,
    DocLength,
}

impl std::str::FromStr for GroupBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GroupBy::None),
            "intent_type" => Ok(GroupBy::IntentType),
            "doc_length" => Ok(GroupBy::DocLength),
            other => Err(Error::arg(format!("unknown grouping `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<SampleRow>,
    pub overall: Aggregate,
    pub by_intent_type: BTreeMap<String, Aggregate>,
    pub by_doc_length: BTreeMap<String, Aggregate>,
}

impl MetricReport {
    pub fn groups(&self, by: GroupBy) -> BTreeMap<String, Aggregate> {
        match by {
            GroupBy::None => BTreeMap::from([("all".to_string(), self.overall)]),
            GroupBy::IntentType => self.by_intent_type.clone(),
            GroupBy::DocLength => self.by_doc_length.clone(),
        }
    }
}

/// Scores every sample of `dataset` against its prediction.
pub fn evaluate_dataset(predictions: &HashMap<String, String>, dataset: &Dataset) -> Result<MetricReport> {
    evaluate_with(predictions, dataset, &[])
}

pub fn evaluate_with(
    predictions: &HashMap<String, String>,
    dataset: &Dataset,
    metrics: &[&dyn TextMetric],
) -> Result<MetricReport> {
    let missing: Vec<String> = dataset
        .samples
        .iter()
        .filter(|s| !predictions.contains_key(&s.id))
        .map(|s| s.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let rows = dataset
        .samples
        .iter()
        .map(|s| {
            let pred = &predictions[&s.id];
            let mut extra = BTreeMap::new();
            for m in metrics {
                for (k, v) in m.score(pred, &s.intent, s)? {
                    extra.insert(format!("{}.{k}", m.name()), v);
                }
            }
            let len = relevant_token_length(s);
            Ok(SampleRow {
                id: s.id.clone(),
                scores: RougeScores::compute(pred, &s.intent),
                intent_type: s.source().and_then(IntentType::from_source),
                length_bucket: LengthBucket::from_tokens(len),
                relevant_tokens: len,
                extra,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut by_intent_type = BTreeMap::new();
    for t in [IntentType::Informational, IntentType::Exploratory] {
        let agg = Aggregate::of(rows.iter().filter(|r| r.intent_type == Some(t)));
        if agg.count > 0 {
            by_intent_type.insert(t.label().to_string(), agg);
        }
    }
    let mut by_doc_length = BTreeMap::new();
    for b in [LengthBucket::Short, LengthBucket::Medium, LengthBucket::Long] {
        let agg = Aggregate::of(rows.iter().filter(|r| r.length_bucket == b));
        if agg.count > 0 {
            by_doc_length.insert(b.label().to_string(), agg);
        }
    }
    Ok(MetricReport {
        overall: Aggregate::of(&rows),
        rows,
        by_intent_type,
        by_doc_length,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeScoreInput {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl JudgeScoreInput {
    /// Probabilities over the default score set `{1, 2, 3, 4, 5}`.
    pub fn five_point(probabilities: Vec<f64>) -> Self {
        Self {
            scores: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            probabilities,
        }
    }
}

/// `Σ p(sᵢ)·sᵢ`.
pub fn weighted_judge_score(input: &JudgeScoreInput) -> Result<f64> {
    let JudgeScoreInput { scores, probabilities } = input;
    if scores.is_empty() || scores.len() != probabilities.len() {
        return Err(Error::arg(format!(
            "{} scores but {} probabilities",
            scores.len(),
            probabilities.len()
        )));
    }
    if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::arg("probabilities must be finite and non-negative"));
    }
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::arg(format!("probabilities sum to {total}, not 1")));
    }
    for (i, s) in scores.iter().enumerate() {
        if scores[..i].contains(s) {
            return Err(Error::arg(format!("score {s} listed twice")));
        }
    }
    Ok(scores.iter().zip(probabilities).map(|(s, p)| s * p).sum())
}
