//! Topic-structured toy corpus.
//!
//! Every sample has a query topic and a distractor topic. Relevant documents
//! mix query-topic words with a fraction of distractor words; irrelevant
//! documents are distractor text that mentions one query word. Gold intents
//! are rendered from a template and only ever use query-topic words.

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{word_tokens, Dataset, Document, QuerySample, Source};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub topic_vocab: usize,
    pub relevant_per_sample: usize,
    pub irrelevant_per_sample: usize,
    pub doc_length: usize,
    /// Probability that a filler slot of a relevant document holds a distractor word.
    pub overlap: f64,
    pub query_terms: usize,
    pub aspect_terms: usize,
    /// Must contain `{query}` and `{aspects}`.
    pub intent_template: String,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            topics: 4,
            topic_vocab: 24,
            relevant_per_sample: 2,
            irrelevant_per_sample: 1,
            doc_length: 12,
            overlap: 0.3,
            query_terms: 2,
            aspect_terms: 2,
            intent_template: "find documents about {query} and {aspects}".into(),
            samples: 200,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::arg(format!("overlap {} outside [0, 1]", self.overlap)));
        }
        let counts = [
            ("topics", self.topics),
            ("topic_vocab", self.topic_vocab),
            ("relevant_per_sample", self.relevant_per_sample),
            ("irrelevant_per_sample", self.irrelevant_per_sample),
            ("doc_length", self.doc_length),
            ("query_terms", self.query_terms),
            ("aspect_terms", self.aspect_terms),
            ("samples", self.samples),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::arg(format!("synthetic `{name}` must be at least 1")));
        }
        if self.topics < 2 {
            return Err(Error::arg("synthetic corpus needs at least 2 topics"));
        }
        let needed = self.query_terms + self.aspect_terms + 1;
        if self.topic_vocab < needed {
            return Err(Error::arg(format!(
                "topic_vocab {} too small: template needs {needed} distinct words per topic",
                self.topic_vocab
            )));
        }
        if self.doc_length < self.query_terms + self.aspect_terms {
            return Err(Error::arg("doc_length shorter than query plus aspect terms"));
        }
        if !self.intent_template.contains("{query}") || !self.intent_template.contains("{aspects}") {
            return Err(Error::arg("intent_template must contain {query} and {aspects}"));
        }
        Ok(())
    }

    /// Template words outside the placeholders.
    pub fn function_words(&self) -> Vec<String> {
        word_tokens(
            &self
                .intent_template
                .replace("{query}", " ")
                .replace("{aspects}", " "),
        )
    }

    pub fn topic_words(&self, topic: usize) -> Vec<String> {
        (0..self.topic_vocab).map(|j| topic_word(topic, j)).collect()
    }
}

pub fn topic_word(topic: usize, index: usize) -> String {
    format!("t{topic}w{index}")
}

/// Inverse of [`topic_word`].
pub fn topic_of_token(token: &str) -> Option<usize> {
    let rest = token.strip_prefix('t')?;
    let (topic, word) = rest.split_once('w')?;
    if topic.is_empty() || word.is_empty() || !word.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    topic.parse().ok()
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let topic = rng.random_range(0..spec.topics);
        let distractor = (topic + rng.random_range(1..spec.topics)) % spec.topics;
        let words = spec.topic_words(topic);
        let distractor_words = spec.topic_words(distractor);

        let picked = index::sample(&mut rng, spec.topic_vocab, spec.query_terms + spec.aspect_terms)
            .into_vec();
        let query_words: Vec<&str> = picked[..spec.query_terms].iter().map(|&j| words[j].as_str()).collect();
        let aspects: Vec<&str> = picked[spec.query_terms..].iter().map(|&j| words[j].as_str()).collect();
        let filler: Vec<&str> = (0..spec.topic_vocab)
            .filter(|j| !picked.contains(j))
            .map(|j| words[j].as_str())
            .collect();

        let sid = format!("syn-{i:05}");
        let relevant = (0..spec.relevant_per_sample)
            .map(|r| {
                let mut toks: Vec<&str> = query_words.iter().chain(&aspects).copied().collect();
                while toks.len() < spec.doc_length {
                    if rng.random::<f64>() < spec.overlap {
                        toks.push(distractor_words.choose(&mut rng).unwrap());
                    } else {
                        toks.push(filler.choose(&mut rng).unwrap());
                    }
                }
                toks.shuffle(&mut rng);
                Document::new(format!("{sid}-r{r}"), toks.join(" ")).with_source(Source::Synthetic)
            })
            .collect();
        let irrelevant = (0..spec.irrelevant_per_sample)
            .map(|r| {
                let mut toks: Vec<&str> = vec![query_words.choose(&mut rng).unwrap()];
                while toks.len() < spec.doc_length {
                    toks.push(distractor_words.choose(&mut rng).unwrap());
                }
                toks.shuffle(&mut rng);
                Document::new(format!("{sid}-i{r}"), toks.join(" ")).with_source(Source::Synthetic)
            })
            .collect();
        let intent = spec
            .intent_template
            .replace("{query}", &query_words.join(" "))
            .replace("{aspects}", &aspects.join(" "));
        let mut sample = QuerySample::new(sid, query_words.join(" "), relevant, irrelevant, intent);
        sample.extra.insert("topic".into(), json!(topic));
        sample.extra.insert("distractor_topic".into(), json!(distractor));
        samples.push(sample);
    }
    Ok(Dataset {
        samples,
        split: Some("synthetic".into()),
    })
}
