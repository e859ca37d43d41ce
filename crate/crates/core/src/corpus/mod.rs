//! Query samples, dataset files, splitting and tokenization.

mod synthetic;
mod vocab;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::idna::AugmentedDocument;

pub use synthetic::{generate_synthetic_corpus, topic_of_token, topic_word, SyntheticSpec};
pub use vocab::{build_vocab, detokenize, tokenize, word_tokens, Vocabulary};

/// Where a document came from. Drives the intent-type grouping at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Trec,
    Semeval,
    Synthetic,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            source: None,
            extra: Map::new(),
        }
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = Some(source);
        self
    }
}

/// One `(query, relevant, irrelevant, intent)` quadruple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    pub id: String,
    pub query: String,
    pub relevant: Vec<Document>,
    pub irrelevant: Vec<Document>,
    pub intent: String,
    /// Hard negatives attached by the augmentation pass, in rank order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub irrelevant_augmented: Option<Vec<AugmentedDocument>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl QuerySample {
    pub fn new(
        id: impl Into<String>,
        query: impl Into<String>,
        relevant: Vec<Document>,
        irrelevant: Vec<Document>,
        intent: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            query: query.into(),
            relevant,
            irrelevant,
            intent: intent.into(),
            irrelevant_augmented: None,
            extra: Map::new(),
        }
    }

    /// Checks the per-sample invariants. `line` is used for error reporting.
    pub fn validate(&self, line: usize) -> Result<()> {
        let schema = |message: String| Error::Schema { line, message };
        if self.id.trim().is_empty() {
            return Err(schema("empty required field `id`".into()));
        }
        if self.query.trim().is_empty() {
            return Err(schema("empty required field `query`".into()));
        }
        if self.intent.trim().is_empty() {
            return Err(schema("empty required field `intent`".into()));
        }
        if self.relevant.is_empty() {
            return Err(schema("`relevant` must hold at least one document".into()));
        }
        let mut seen = HashSet::new();
        for doc in self.relevant.iter().chain(&self.irrelevant) {
            if doc.id.trim().is_empty() {
                return Err(schema("document with empty `id`".into()));
            }
            if doc.text.trim().is_empty() {
                return Err(schema(format!("document `{}` has empty text", doc.id)));
            }
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::Integrity(format!(
                    "line {line}: document `{}` listed twice in sample `{}`",
                    doc.id, self.id
                )));
            }
        }
        Ok(())
    }

    /// The source of the sample, taken from its first relevant document.
    pub fn source(&self) -> Option<Source> {
        self.relevant.iter().find_map(|d| d.source)
    }

    pub fn all_documents(&self) -> impl Iterator<Item = &Document> {
        self.relevant.iter().chain(&self.irrelevant)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<QuerySample>,
    pub split: Option<String>,
}

impl Dataset {
    pub fn new(samples: Vec<QuerySample>) -> Self {
        Self {
            samples,
            split: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&QuerySample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Number of samples per source (samples without one count as `external`).
    pub fn source_counts(&self) -> BTreeMap<Source, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.source().unwrap_or(Source::External)).or_insert(0) += 1;
        }
        counts
    }

    /// Validates every sample plus the dataset-level constraints.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut doc_text: HashMap<&str, &str> = HashMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            let line = i + 1;
            s.validate(line)?;
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Integrity(format!(
                    "line {line}: duplicate sample id `{}`",
                    s.id
                )));
            }
            for d in s.all_documents() {
                match doc_text.get(d.id.as_str()) {
                    Some(text) if *text != d.text => {
                        return Err(Error::Integrity(format!(
                            "line {line}: document id `{}` reused for a different text",
                            d.id
                        )))
                    }
                    _ => {
                        doc_text.insert(&d.id, &d.text);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reads a line-delimited dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_sample(&line, line_no)?);
    }
    let dataset = Dataset::new(samples);
    dataset.validate()?;
    Ok(dataset)
}

/// Parses one record; errors carry `line_no`.
pub fn parse_sample(line: &str, line_no: usize) -> Result<QuerySample> {
    let sample: QuerySample = serde_json::from_str(line).map_err(|e| Error::Schema {
        line: line_no,
        message: e.to_string(),
    })?;
    sample.validate(line_no)?;
    Ok(sample)
}

/// Writes one record per line, in dataset order. Overwrites `path`.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in &dataset.samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Seeded shuffle, then consecutive train/val/test slices of the requested sizes.
pub fn split_dataset(
    dataset: &Dataset,
    sizes: (usize, usize, usize),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (train, val, test) = sizes;
    let total = train + val + test;
    if total > dataset.len() {
        return Err(Error::arg(format!(
            "split sizes sum to {total} but the dataset has {} samples",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>, name: &str| Dataset {
        samples: order[range]
            .iter()
            .map(|&i| dataset.samples[i].clone())
            .collect(),
        split: Some(name.to_string()),
    };
    Ok((
        take(0..train, "train"),
        take(train..train + val, "val"),
        take(train + val..total, "test"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn freon_line() -> &'static str {
        r#"{"id":"q1","query":"Freon-12","relevant":[{"id":"d1","text":"Freon-12 refrigerant is being phased out"}],"irrelevant":[],"intent":"Find effects of the Freon-12 phase-out"}"#
    }

    #[test]
    fn loads_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, format!("{}\n", freon_line())).unwrap();
        let d = load_dataset(&path).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.samples[0].relevant.len(), 1);
        assert!(d.samples[0].irrelevant.is_empty());
    }

    #[test]
    fn missing_intent_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let bad = r#"{"id":"q2","query":"x","relevant":[{"id":"d9","text":"y"}],"irrelevant":[]}"#;
        fs::write(&path, format!("{}\n{}\n", freon_line(), bad)).unwrap();
        match load_dataset(&path) {
            Err(Error::Schema { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("intent"), "{message}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn empty_intent_is_schema_error() {
        let bad = r#"{"id":"q2","query":"x","relevant":[{"id":"d9","text":"y"}],"irrelevant":[],"intent":"  "}"#;
        assert!(matches!(parse_sample(bad, 4), Err(Error::Schema { line: 4, .. })));
    }

    #[test]
    fn duplicate_sample_id_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, format!("{0}\n{0}\n", freon_line())).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn document_in_both_lists_rejected() {
        let bad = r#"{"id":"q","query":"x","relevant":[{"id":"d","text":"y"}],"irrelevant":[{"id":"d","text":"y"}],"intent":"z"}"#;
        assert!(matches!(parse_sample(bad, 1), Err(Error::Integrity(_))));
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let line = r#"{"id":"q","query":"x","relevant":[{"id":"d","text":"y","grade":2}],"irrelevant":[],"intent":"z","lang":"en"}"#;
        let s = parse_sample(line, 1).unwrap();
        assert_eq!(s.extra["lang"], "en");
        assert_eq!(s.relevant[0].extra["grade"], 2);
        let back: Value = serde_json::to_value(&s).unwrap();
        let orig: Value = serde_json::from_str(line).unwrap();
        assert_eq!(back, orig);
    }

    #[test]
    fn full_scale_split_sizes() {
        let samples = (0..5358)
            .map(|i| {
                QuerySample::new(
                    format!("q{i}"),
                    "q",
                    vec![Document::new(format!("d{i}"), "t")],
                    vec![],
                    "i",
                )
            })
            .collect();
        let d = Dataset::new(samples);
        let (a, b, c) = split_dataset(&d, (5000, 100, 258), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (5000, 100, 258));
    }

    #[test]
    fn split_rejects_oversized_request() {
        let d = Dataset::new(
            (0..10)
                .map(|i| {
                    QuerySample::new(format!("q{i}"), "q", vec![Document::new("d", "t")], vec![], "i")
                })
                .collect(),
        );
        assert!(matches!(split_dataset(&d, (9, 1, 1), 0), Err(Error::Argument(_))));
        let first = split_dataset(&d, (8, 1, 1), 5).unwrap();
        let second = split_dataset(&d, (8, 1, 1), 5).unwrap();
        assert_eq!(first, second);
    }
}
