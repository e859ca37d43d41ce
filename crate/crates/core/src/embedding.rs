//! Text-embedding providers and cosine primitives.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::process::{Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{word_tokens, Dataset};
use crate::error::{Error, Result};

/// Marker placed between concatenated texts before embedding.
pub const FUSION_SEPARATOR: &str = "[SEP]";

/// Finite, fixed-length real vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::arg("embedding vectors need at least one dimension"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "embedding vector".into(),
            });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Anything that turns text into a vector of constant dimension.
///
/// Implementations must be deterministic for a given instance and input.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Joins texts with [`FUSION_SEPARATOR`].
pub fn concat_texts<S: AsRef<str>>(parts: &[S]) -> String {
    parts
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(&format!(" {FUSION_SEPARATOR} "))
}

/// Cosine similarity; 0 when either operand is the zero vector.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_slices(a.values(), b.values())
}

pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "cosine of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(crate::autograd::cosine_value(a, b).clamp(-1.0, 1.0))
}

/// L2-normalized bag-of-words term frequencies over a fixed word list.
///
/// Words outside the list are ignored; text with no known word maps to the
/// zero vector.
#[derive(Clone, Debug)]
pub struct TermFrequencyEmbedder {
    index: HashMap<String, usize>,
}

impl TermFrequencyEmbedder {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut index = HashMap::new();
        for w in words {
            let next = index.len();
            index.entry(w.into()).or_insert(next);
        }
        Self { index }
    }

    /// Sorted set of every word in queries, intents and documents.
    pub fn from_datasets(datasets: &[&Dataset]) -> Self {
        let mut words = BTreeSet::new();
        for d in datasets {
            for s in &d.samples {
                words.extend(word_tokens(&s.query));
                words.extend(word_tokens(&s.intent));
                for doc in s.all_documents() {
                    words.extend(word_tokens(&doc.text));
                }
            }
        }
        Self::new(words)
    }
}

impl EmbeddingProvider for TermFrequencyEmbedder {
    fn dim(&self) -> usize {
        self.index.len().max(1)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut v = vec![0.0; self.dim()];
        for w in word_tokens(&text.replace(FUSION_SEPARATOR, " ")) {
            if let Some(&i) = self.index.get(&w) {
                v[i] += 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(EmbeddingVector(v))
    }
}

/// Settings for an external embedding process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalProviderConfig {
    pub name: String,
    /// Program and arguments. The process receives the text on stdin and must
    /// print a JSON array of numbers on stdout.
    pub command: Vec<String>,
    /// Passed to the process as `QUIDS_EMBED_MODEL`.
    #[serde(default)]
    pub model: Option<String>,
    pub dim: usize,
}

/// Adapter for an out-of-process neural encoder.
///
/// Results are memoized so repeated calls on one instance return identical
/// vectors even if the backend is not bit-reproducible.
pub struct CommandEmbedder {
    config: ExternalProviderConfig,
    cache: Mutex<HashMap<String, EmbeddingVector>>,
}

impl CommandEmbedder {
    pub fn new(config: ExternalProviderConfig) -> Result<Self> {
        if config.command.is_empty() {
            return Err(Error::arg("external provider needs a command"));
        }
        if config.dim == 0 {
            return Err(Error::arg("external provider dim must be positive"));
        }
        Ok(Self {
            config,
            cache: Mutex::new(HashMap::new()),
        })
    }

    fn call(&self, text: &str) -> Result<EmbeddingVector> {
        let provider = |msg: String| Error::Provider(format!("{}: {msg}", self.config.name));
        let mut cmd = Command::new(&self.config.command[0]);
        cmd.args(&self.config.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(model) = &self.config.model {
            cmd.env("QUIDS_EMBED_MODEL", model);
        }
        let mut child = cmd.spawn().map_err(|e| provider(format!("spawn failed: {e}")))?;
        child
            .stdin
            .take()
            .expect("stdin piped")
            .write_all(text.as_bytes())
            .map_err(|e| provider(format!("write failed: {e}")))?;
        let out = child
            .wait_with_output()
            .map_err(|e| provider(format!("wait failed: {e}")))?;
        if !out.status.success() {
            return Err(provider(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let values: Vec<f64> = serde_json::from_slice(&out.stdout)
            .map_err(|e| provider(format!("bad output: {e}")))?;
        if values.len() != self.config.dim {
            return Err(provider(format!(
                "returned {} dims, expected {}",
                values.len(),
                self.config.dim
            )));
        }
        EmbeddingVector::new(values).map_err(|e| provider(e.to_string()))
    }
}

impl EmbeddingProvider for CommandEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if let Some(v) = self.cache.lock().unwrap().get(text) {
            return Ok(v.clone());
        }
        let v = self.call(text)?;
        self.cache
            .lock()
            .unwrap()
            .entry(text.to_string())
            .or_insert(v.clone());
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&v(&[1., 0.]), &v(&[1., 0.])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1., 0.]), &v(&[0., 1.])).unwrap(), 0.0);
        let s = cosine_similarity(&v(&[1., 1.]), &v(&[1., 0.])).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_distance(&v(&[1., 0.]), &v(&[-1., 0.])).unwrap(), 2.0);
        assert_eq!(cosine_distance(&v(&[3., 4.]), &v(&[3., 4.])).unwrap(), 0.0);
        assert_eq!(cosine_distance(&v(&[1., 0.]), &v(&[0., 2.])).unwrap(), 1.0);
    }

    #[test]
    fn zero_vector_and_dim_mismatch() {
        assert_eq!(cosine_similarity(&v(&[0., 0.]), &v(&[1., 0.])).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&v(&[1.]), &v(&[1., 0.])),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn term_frequency_reference() {
        let e = TermFrequencyEmbedder::new(["cat", "dog"]);
        let x = e.embed("cat cat dog").unwrap();
        let s5 = 5f64.sqrt();
        assert!((x.values()[0] - 2.0 / s5).abs() < 1e-12);
        assert!((x.values()[1] - 1.0 / s5).abs() < 1e-12);
        assert_eq!(e.embed("cat cat dog").unwrap(), x);
        assert_eq!(e.embed("").unwrap().values(), &[0.0, 0.0]);
        assert_eq!(e.embed("dog cat cat").unwrap(), x);
    }

    #[test]
    fn separator_is_not_a_term() {
        let e = TermFrequencyEmbedder::new(["sep", "a"]);
        assert_eq!(e.embed(&concat_texts(&["a", "a"])).unwrap().values()[0], 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_err());
    }

    #[cfg(unix)]
    #[test]
    fn command_provider_round_trip_and_errors() {
        let ok = CommandEmbedder::new(ExternalProviderConfig {
            name: "echo".into(),
            command: vec!["sh".into(), "-c".into(), "cat >/dev/null; printf '[0.5, 1.5]'".into()],
            model: Some("m".into()),
            dim: 2,
        })
        .unwrap();
        assert_eq!(ok.embed("hello").unwrap().values(), &[0.5, 1.5]);

        let bad = CommandEmbedder::new(ExternalProviderConfig {
            name: "broken".into(),
            command: vec!["sh".into(), "-c".into(), "exit 3".into()],
            model: None,
            dim: 2,
        })
        .unwrap();
        assert!(matches!(bad.embed("x"), Err(Error::Provider(_))));
    }
}
