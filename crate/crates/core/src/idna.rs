//! Intent-driven negative augmentation.
//!
//! For a training sample: rank its relevant documents against `(query; intent)`,
//! fuse them in rank order, rank the existing irrelevant documents against the
//! fused embedding, then top the list up to `h` documents with the pool
//! documents closest to the fused embedding.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Document, QuerySample};
use crate::embedding::{concat_texts, cosine_similarity, EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};

pub const DEFAULT_EXPECTED_NEGATIVES: usize = 3;
pub const DEFAULT_THRESHOLD: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    MinedAboveThreshold,
    MinedFallback,
}

/// File form of one augmented negative (`irrelevant_augmented` entries).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedDocument {
    pub id: String,
    pub text: String,
    pub similarity: f64,
    pub provenance: Provenance,
}

impl AugmentedDocument {
    pub fn to_document(&self) -> Document {
        Document::new(self.id.clone(), self.text.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Negative {
    pub document: Document,
    pub similarity: f64,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationResult {
    pub sample_id: String,
    pub ranked_relevant: Vec<Document>,
    pub fused_text: String,
    pub fused_embedding: EmbeddingVector,
    /// Original documents first (ranked), then mined ones.
    pub negatives: Vec<Negative>,
}

impl AugmentationResult {
    pub fn to_file_form(&self) -> Vec<AugmentedDocument> {
        self.negatives
            .iter()
            .map(|n| AugmentedDocument {
                id: n.document.id.clone(),
                text: n.document.text.clone(),
                similarity: n.similarity,
                provenance: n.provenance,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Expected number of irrelevant documents per sample.
    pub expected: usize,
    pub threshold: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            expected: DEFAULT_EXPECTED_NEGATIVES,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Stable sort of `(item, similarity)` pairs by descending similarity.
fn sort_by_similarity<T>(items: &mut [(T, f64)]) {
    items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
}

fn rank_documents(
    docs: &[Document],
    anchor: &EmbeddingVector,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<(Document, f64)>> {
    let mut scored = docs
        .iter()
        .map(|d| Ok((d.clone(), cosine_similarity(&embedder.embed(&d.text)?, anchor)?)))
        .collect::<Result<Vec<_>>>()?;
    sort_by_similarity(&mut scored);
    Ok(scored)
}

/// Relevant documents ordered by similarity to the `(query; intent)` embedding.
/// Needs the gold intent, so it is a training-time operation.
pub fn rank_relevant(
    sample: &QuerySample,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<Document>> {
    if sample.intent.trim().is_empty() {
        return Err(Error::Precondition(format!(
            "sample `{}` has no gold intent; relevant ranking is training-only",
            sample.id
        )));
    }
    if sample.relevant.is_empty() {
        return Err(Error::Precondition(format!(
            "sample `{}` has no relevant documents",
            sample.id
        )));
    }
    let anchor = embedder.embed(&concat_texts(&[&sample.query, &sample.intent]))?;
    Ok(rank_documents(&sample.relevant, &anchor, embedder)?
        .into_iter()
        .map(|(d, _)| d)
        .collect())
}

/// Concatenates ranked documents and embeds the result.
pub fn fuse_relevant(
    ranked: &[Document],
    embedder: &dyn EmbeddingProvider,
) -> Result<(String, EmbeddingVector)> {
    if ranked.is_empty() {
        return Err(Error::arg("cannot fuse an empty document list"));
    }
    let texts: Vec<&str> = ranked.iter().map(|d| d.text.as_str()).collect();
    let fused = concat_texts(&texts);
    let embedding = embedder.embed(&fused)?;
    Ok((fused, embedding))
}

pub fn rank_irrelevant(
    sample: &QuerySample,
    fused: &EmbeddingVector,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<(Document, f64)>> {
    rank_documents(&sample.irrelevant, fused, embedder)
}

/// Candidate documents for mining, embedded once.
pub struct DocumentPool {
    docs: Vec<Document>,
    embeddings: Vec<EmbeddingVector>,
}

impl DocumentPool {
    pub fn new(docs: Vec<Document>, embedder: &dyn EmbeddingProvider) -> Result<Self> {
        let mut seen = HashSet::new();
        let docs: Vec<Document> = docs.into_iter().filter(|d| seen.insert(d.id.clone())).collect();
        let embeddings = docs
            .iter()
            .map(|d| embedder.embed(&d.text))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { docs, embeddings })
    }

    /// Every relevant and irrelevant document in `dataset`, deduplicated by id.
    pub fn from_dataset(dataset: &Dataset, embedder: &dyn EmbeddingProvider) -> Result<Self> {
        let docs = dataset
            .samples
            .iter()
            .flat_map(|s| s.all_documents().cloned())
            .collect();
        Self::new(docs, embedder)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Runs all four steps for one sample.
///
/// Pool documents attached to the sample itself are skipped. When fewer than
/// `expected` originals exist, pool documents above `threshold` are appended
/// best-first, then the best remaining sub-threshold ones (flagged
/// [`Provenance::MinedFallback`]) until the size is reached or the pool runs out.
pub fn augment_negatives(
    sample: &QuerySample,
    pool: &DocumentPool,
    embedder: &dyn EmbeddingProvider,
    expected: usize,
    threshold: f64,
) -> Result<AugmentationResult> {
    if expected == 0 {
        return Err(Error::arg("expected negative count must be at least 1"));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::arg(format!("threshold {threshold} outside (0, 1]")));
    }
    let ranked_relevant = rank_relevant(sample, embedder)?;
    let (fused_text, fused_embedding) = fuse_relevant(&ranked_relevant, embedder)?;
    let mut negatives: Vec<Negative> = rank_irrelevant(sample, &fused_embedding, embedder)?
        .into_iter()
        .map(|(document, similarity)| Negative {
            document,
            similarity,
            provenance: Provenance::Original,
        })
        .collect();

    if negatives.len() < expected {
        let own: HashSet<&str> = sample.all_documents().map(|d| d.id.as_str()).collect();
        let mut candidates = pool
            .docs
            .iter()
            .zip(&pool.embeddings)
            .filter(|(d, _)| !own.contains(d.id.as_str()))
            .map(|(d, e)| Ok((d, cosine_similarity(e, &fused_embedding)?)))
            .collect::<Result<Vec<_>>>()?;
        sort_by_similarity(&mut candidates);
        let needed = expected - negatives.len();
        for (d, sim) in candidates.into_iter().take(needed) {
            negatives.push(Negative {
                document: d.clone(),
                similarity: sim,
                provenance: if sim > threshold {
                    Provenance::MinedAboveThreshold
                } else {
                    Provenance::MinedFallback
                },
            });
        }
    }

    if negatives.is_empty() {
        return Err(Error::Augmentation {
            sample: sample.id.clone(),
            message: "no irrelevant documents and an empty pool".into(),
        });
    }
    Ok(AugmentationResult {
        sample_id: sample.id.clone(),
        ranked_relevant,
        fused_text,
        fused_embedding,
        negatives,
    })
}

/// The negative used at a training step: round-robin over the ranked list.
pub fn select_training_negative(
    result: &AugmentationResult,
    epoch: usize,
    step: usize,
) -> Result<&Negative> {
    if result.negatives.is_empty() {
        return Err(Error::Precondition(format!(
            "sample `{}` has no negatives to select from",
            result.sample_id
        )));
    }
    Ok(&result.negatives[training_negative_index(result.negatives.len(), epoch, step)])
}

/// Round-robin position `(epoch + step) mod count`.
pub fn training_negative_index(count: usize, epoch: usize, step: usize) -> usize {
    (epoch + step) % count
}

/// Augments every sample of `dataset` against a pool built from the dataset
/// itself. Returns the dataset with `irrelevant_augmented` filled in.
///
/// `workers > 1` splits the samples over scoped threads; output order and
/// content do not depend on the worker count.
pub fn augment_dataset(
    dataset: &Dataset,
    embedder: &dyn EmbeddingProvider,
    config: AugmentConfig,
    workers: usize,
) -> Result<(Dataset, Vec<AugmentationResult>)> {
    let pool = DocumentPool::from_dataset(dataset, embedder)?;
    let run = |s: &QuerySample| augment_negatives(s, &pool, embedder, config.expected, config.threshold);
    let results: Vec<AugmentationResult> = if workers <= 1 || dataset.len() < 2 {
        dataset.samples.iter().map(run).collect::<Result<_>>()?
    } else {
        let chunk = dataset.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = dataset
                .samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(run).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(dataset.len());
            for h in handles {
                all.extend(h.join().expect("augmentation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let mut out = dataset.clone();
    for (s, r) in out.samples.iter_mut().zip(&results) {
        s.irrelevant_augmented = Some(r.to_file_form());
    }
    Ok((out, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Looks vectors up by exact text.
    struct Table(HashMap<String, Vec<f64>>);

    impl EmbeddingProvider for Table {
        fn dim(&self) -> usize {
            2
        }
        fn embed(&self, text: &str) -> Result<EmbeddingVector> {
            EmbeddingVector::new(self.0.get(text).cloned().unwrap_or(vec![0.0, 0.0]))
        }
    }

    fn table(entries: &[(&str, [f64; 2])]) -> Table {
        Table(entries.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect())
    }

    /// Unit vector at the given cosine to [1, 0].
    fn at(cos: f64) -> [f64; 2] {
        [cos, (1.0 - cos * cos).sqrt()]
    }

    #[test]
    fn relevant_ranking_by_query_intent() {
        let e = table(&[
            ("q [SEP] y", [1.0, 0.0]),
            ("d1", [1.0, 0.0]),
            ("d2", [0.0, 1.0]),
            ("d3", [0.8, 0.6]),
        ]);
        let s = QuerySample::new(
            "s",
            "q",
            vec![Document::new("1", "d1"), Document::new("2", "d2"), Document::new("3", "d3")],
            vec![],
            "y",
        );
        let ids: Vec<_> = rank_relevant(&s, &e).unwrap().into_iter().map(|d| d.id).collect();
        assert_eq!(ids, ["1", "3", "2"]);
    }

    #[test]
    fn ties_keep_original_order() {
        let e = table(&[("q [SEP] y", [1.0, 0.0]), ("a", [0.5, 0.5]), ("b", [0.5, 0.5])]);
        let s = QuerySample::new("s", "q", vec![Document::new("2", "b"), Document::new("1", "a")], vec![], "y");
        let ids: Vec<_> = rank_relevant(&s, &e).unwrap().into_iter().map(|d| d.id).collect();
        assert_eq!(ids, ["2", "1"]);
    }

    #[test]
    fn missing_intent_is_precondition_error() {
        let e = table(&[]);
        let s = QuerySample::new("s", "q", vec![Document::new("1", "a")], vec![], "");
        assert!(matches!(rank_relevant(&s, &e), Err(Error::Precondition(_))));
    }

    #[test]
    fn fuse_joins_with_separator() {
        let e = table(&[]);
        let (text, _) = fuse_relevant(&[Document::new("1", "a b"), Document::new("2", "c")], &e).unwrap();
        assert_eq!(text, "a b [SEP] c");
        let (single, _) = fuse_relevant(&[Document::new("1", "a b")], &e).unwrap();
        assert_eq!(single, "a b");
    }

    #[test]
    fn irrelevant_ranking_reverses_low_first() {
        let e = table(&[("lo", at(0.2)), ("hi", at(0.9))]);
        let s = QuerySample::new(
            "s",
            "q",
            vec![Document::new("r", "r")],
            vec![Document::new("1", "lo"), Document::new("2", "hi")],
            "y",
        );
        let anchor = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let ranked = rank_irrelevant(&s, &anchor, &e).unwrap();
        assert_eq!(ranked[0].0.id, "2");
        assert!((ranked[0].1 - 0.9).abs() < 1e-12);
        let empty = QuerySample::new("s", "q", vec![Document::new("r", "r")], vec![], "y");
        assert!(rank_irrelevant(&empty, &anchor, &e).unwrap().is_empty());
    }

    fn mining_fixture(pool_sims: &[f64], originals: usize) -> (QuerySample, DocumentPool, Table) {
        let mut entries = vec![("q [SEP] y".to_string(), [1.0, 0.0]), ("rel".to_string(), [1.0, 0.0])];
        let irrelevant: Vec<Document> = (0..originals)
            .map(|i| {
                entries.push((format!("orig{i}"), at(0.5)));
                Document::new(format!("o{i}"), format!("orig{i}"))
            })
            .collect();
        let pool_docs: Vec<Document> = pool_sims
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                entries.push((format!("pool{i}"), at(c)));
                Document::new(format!("p{i}"), format!("pool{i}"))
            })
            .collect();
        let e = Table(entries.into_iter().map(|(k, v)| (k, v.to_vec())).collect());
        let s = QuerySample::new("s", "q", vec![Document::new("r", "rel")], irrelevant, "y");
        let pool = DocumentPool::new(pool_docs, &e).unwrap();
        (s, pool, e)
    }

    #[test]
    fn mines_above_threshold_first() {
        let (s, pool, e) = mining_fixture(&[0.7, 0.9, 0.85], 1);
        let r = augment_negatives(&s, &pool, &e, 3, 0.8).unwrap();
        let got: Vec<_> = r.negatives.iter().map(|n| (n.document.id.as_str(), n.provenance)).collect();
        assert_eq!(
            got,
            [
                ("o0", Provenance::Original),
                ("p1", Provenance::MinedAboveThreshold),
                ("p2", Provenance::MinedAboveThreshold)
            ]
        );
    }

    #[test]
    fn no_mining_when_size_met() {
        let (s, pool, e) = mining_fixture(&[0.99], 3);
        let r = augment_negatives(&s, &pool, &e, 3, 0.8).unwrap();
        let ranked = rank_irrelevant(&s, &r.fused_embedding, &e).unwrap();
        assert_eq!(r.negatives.len(), 3);
        assert!(r.negatives.iter().zip(&ranked).all(|(n, (d, _))| &n.document == d));
        assert!(r.negatives.iter().all(|n| n.provenance == Provenance::Original));
    }

    #[test]
    fn fallback_below_threshold() {
        let (s, pool, e) = mining_fixture(&[0.4, 0.5], 0);
        let r = augment_negatives(&s, &pool, &e, 2, 0.8).unwrap();
        let got: Vec<_> = r.negatives.iter().map(|n| (n.document.id.as_str(), n.provenance)).collect();
        assert_eq!(got, [("p1", Provenance::MinedFallback), ("p0", Provenance::MinedFallback)]);
    }

    #[test]
    fn empty_pool_without_originals_fails() {
        let (s, pool, e) = mining_fixture(&[], 0);
        assert!(matches!(
            augment_negatives(&s, &pool, &e, 3, 0.8),
            Err(Error::Augmentation { .. })
        ));
    }

    #[test]
    fn own_documents_never_mined() {
        let (s, _, e) = mining_fixture(&[0.9], 0);
        let pool = DocumentPool::new(vec![Document::new("r", "rel"), Document::new("p0", "pool0")], &e).unwrap();
        let r = augment_negatives(&s, &pool, &e, 3, 0.8).unwrap();
        assert_eq!(r.negatives.len(), 1);
        assert_eq!(r.negatives[0].document.id, "p0");
    }

    #[test]
    fn round_robin_selection() {
        let (s, pool, e) = mining_fixture(&[0.9, 0.85], 1);
        let r = augment_negatives(&s, &pool, &e, 3, 0.8).unwrap();
        let picks: Vec<_> = (0..4)
            .map(|step| select_training_negative(&r, 0, step).unwrap().document.id.clone())
            .collect();
        assert_eq!(picks, ["o0", "p0", "p1", "o0"]);
        let mut single = r.clone();
        single.negatives.truncate(1);
        assert_eq!(select_training_negative(&single, 5, 7).unwrap().document.id, "o0");
        single.negatives.clear();
        assert!(select_training_negative(&single, 0, 0).is_err());
    }
}
