use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// Word-level vocabulary. Ids are contiguous from 0; the first five are the
/// specials `PAD, BOS, EOS, SEP, UNK`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub const PAD: u32 = PAD;
    pub const BOS: u32 = BOS;
    pub const EOS: u32 = EOS;
    pub const SEP: u32 = SEP;
    pub const UNK: u32 = UNK;
    pub const NUM_SPECIALS: usize = SPECIALS.len();

    /// Specials followed by `words` in the given order. Duplicates are dropped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for w in words {
            let w = w.into();
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len() as u32);
                tokens.push(w);
            }
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> std::result::Result<Self, String> {
        if tokens.len() < SPECIALS.len()
            || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s)
        {
            return Err("vocabulary must start with <pad> <bos> <eos> <sep> <unk>".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(format!("duplicate vocabulary token `{t}`"));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn tokenize(text: &str, vocab: &Vocabulary, add_bos_eos: bool) -> Vec<u32> {
    let words = word_tokens(text);
    let mut ids = Vec::with_capacity(words.len() + 2);
    if add_bos_eos {
        ids.push(BOS);
    }
    ids.extend(words.iter().map(|w| vocab.id_or_unk(w)));
    if add_bos_eos {
        ids.push(EOS);
    }
    ids
}

/// Joins non-special tokens with single spaces.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| !Vocabulary::is_special(id))
        .filter_map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Keeps the `max_size - 5` most frequent words, ties broken lexicographically.
pub fn build_vocab(dataset: &Dataset, max_size: usize) -> Result<Vocabulary> {
    if dataset.is_empty() {
        return Err(Error::arg("cannot build a vocabulary from an empty dataset"));
    }
    if max_size <= SPECIALS.len() {
        return Err(Error::arg(format!(
            "max_size {max_size} leaves no room beyond the {} special tokens",
            SPECIALS.len()
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut count = |text: &str| {
        for w in word_tokens(text) {
            *counts.entry(w).or_insert(0) += 1;
        }
    };
    for s in &dataset.samples {
        count(&s.query);
        count(&s.intent);
        for d in s.all_documents() {
            count(&d.text);
        }
        for d in s.irrelevant_augmented.iter().flatten() {
            count(&d.text);
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, _)| !SPECIALS.contains(&w.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - SPECIALS.len());
    Ok(Vocabulary::from_words(ranked.into_iter().map(|(w, _)| w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, QuerySample};

    fn corpus(text: &str) -> Dataset {
        Dataset::new(vec![QuerySample::new(
            "q",
            text,
            vec![Document::new("d", text)],
            vec![],
            text,
        )])
    }

    #[test]
    fn frequency_order_and_cutoff() {
        let d = corpus("a a b");
        let v = build_vocab(&d, 7).unwrap();
        assert_eq!(v.len(), 7);
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert!(a < b);
        for s in SPECIALS {
            assert!(v.id(s).is_some());
        }
        let v6 = build_vocab(&d, 6).unwrap();
        assert!(v6.id("b").is_none());
        assert_eq!(tokenize("b", &v6, false), vec![UNK]);
        assert_eq!(build_vocab(&d, 7).unwrap(), v);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocab(&corpus("zeta alpha"), 10).unwrap();
        assert!(v.id("alpha").unwrap() < v.id("zeta").unwrap());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(build_vocab(&Dataset::default(), 10).is_err());
        assert!(build_vocab(&corpus("a"), 5).is_err());
    }

    #[test]
    fn tokenize_wraps_and_maps_unknowns() {
        let v = Vocabulary::from_words(["the", "cat"]);
        let ids = tokenize("The cat", &v, true);
        assert_eq!(ids, vec![BOS, v.id("the").unwrap(), v.id("cat").unwrap(), EOS]);
        assert_eq!(tokenize("zzz", &v, true), vec![BOS, UNK, EOS]);
        assert_eq!(detokenize(&tokenize("the cat", &v, true), &v), "the cat");
    }

    #[test]
    fn punctuation_splits_words() {
        assert_eq!(word_tokens("Freon-12, phased-OUT!"), vec!["freon", "12", "phased", "out"]);
    }

    #[test]
    fn serde_rejects_missing_specials() {
        let r: std::result::Result<Vocabulary, _> = serde_json::from_str(r#"["a","b"]"#);
        assert!(r.is_err());
    }
}
