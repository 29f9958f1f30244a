//! Tokenization, vocabulary, dataset readers, batching and transfer-set
//! augmentation.

mod augment;
mod batch;
mod io;

pub use augment::{augment_mask, augment_ngram, build_transfer_set, AugmentConfig, DEFAULT_P_MASK, TRANSFER_SET_CAP};
pub use batch::{make_batches, Batch, Batching, PaddedTokens};
pub use io::{load_word_vectors, read_corpus, read_tsv, read_tsv_with_labels, write_tsv, Dataset, OOV_INIT_RANGE};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const RESERVED_TOKENS: [&str; 3] = [PAD, UNK, MASK];

/// Lowercases, splits on Unicode whitespace and splits every maximal run of
/// ASCII punctuation into its own token. The reserved tokens `[PAD]`,
/// `[UNK]` and `[MASK]` pass through unchanged when they appear as whole
/// words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if RESERVED_TOKENS.contains(&word) {
            out.push(word.to_string());
            continue;
        }
        let lower = word.to_lowercase();
        let mut current = String::new();
        let mut current_is_punct = false;
        for ch in lower.chars() {
            let punct = ch.is_ascii_punctuation();
            if !current.is_empty() && punct != current_is_punct {
                out.push(std::mem::take(&mut current));
            }
            current_is_punct = punct;
            current.push(ch);
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Dense token-to-id map with reserved ids 0 = `[PAD]`, 1 = `[UNK]`,
/// 2 = `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Only the reserved tokens.
    pub fn reserved() -> Self {
        Self::from_tokens(std::iter::empty::<String>()).expect("reserved tokens are valid")
    }

    /// Reserved tokens followed by `tokens` in the given order, skipping
    /// duplicates and reserved names.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED_TOKENS {
            v.push(r.to_string());
        }
        for t in tokens {
            let t = t.into();
            if t.is_empty() {
                return Err(Error::Input("empty token in vocabulary".into()));
            }
            if !v.index.contains_key(&t) {
                v.push(t);
            }
        }
        Ok(v)
    }

    /// Builds a vocabulary from tokenized sentences: tokens seen at least
    /// `min_count` times, most frequent first, ties broken alphabetically.
    /// `max_size` caps the total size including reserved ids.
    pub fn build<'a, I>(sentences: I, min_count: usize, max_size: Option<usize>) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in sentences {
            for tok in sentence {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED_TOKENS.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(cap) = max_size {
            ranked.truncate(cap.saturating_sub(RESERVED_TOKENS.len()));
        }
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string())).expect("tokens are non-empty")
    }

    fn push(&mut self, t: String) {
        self.index.insert(t.clone(), self.tokens.len() as u32);
        self.tokens.push(t);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `[UNK]` when absent.
    pub fn lookup(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        self.encode(&tokenize(text))
    }
}

/// Whether examples have one sentence or a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Single,
    Pair,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(TaskKind::Single),
            "pair" => Ok(TaskKind::Pair),
            other => Err(Error::Input(format!("unknown task kind {other:?}; expected single or pair"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: Option<usize>,
}

impl LabeledExample {
    pub fn single(text: impl Into<String>, label: Option<usize>) -> Self {
        LabeledExample {
            text_a: text.into(),
            text_b: None,
            label,
        }
    }

    pub fn pair(a: impl Into<String>, b: impl Into<String>, label: Option<usize>) -> Self {
        LabeledExample {
            text_a: a.into(),
            text_b: Some(b.into()),
            label,
        }
    }

    pub fn kind(&self) -> TaskKind {
        if self.text_b.is_some() {
            TaskKind::Pair
        } else {
            TaskKind::Single
        }
    }
}

/// Maps label strings to class ids. When every label is a non-negative
/// integer the integer is the id, so "1" stays class 1; otherwise labels are
/// sorted and numbered.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDict {
    labels: Vec<String>,
}

impl LabelDict {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        if labels.is_empty() || !labels.iter().all(|l| seen.insert(l)) {
            return Err(Error::Input("label dictionary must be non-empty with unique labels".into()));
        }
        Ok(LabelDict { labels })
    }

    pub fn from_observed<'a>(observed: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut distinct: Vec<&str> = observed.into_iter().collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.is_empty() {
            return Err(Error::Input("no labels observed".into()));
        }
        let numeric: Option<Vec<usize>> = distinct.iter().map(|l| l.parse::<usize>().ok()).collect();
        match numeric {
            Some(ids) if distinct.iter().all(|l| !l.starts_with('+') && (l.len() == 1 || !l.starts_with('0'))) => {
                let max = *ids.iter().max().expect("non-empty");
                Self::new((0..=max).map(|i| i.to_string()).collect())
            }
            _ => Self::new(distinct.into_iter().map(str::to_string).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Hello, world!"), toks(&["hello", ",", "world", "!"]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A A a"), toks(&["a", "a", "a"]));
        assert_eq!(tokenize("wait...what?!"), toks(&["wait", "...", "what", "?!"]));
        assert_eq!(tokenize("a [MASK] b"), toks(&["a", "[MASK]", "b"]));
        assert_eq!(tokenize("tab\tand\nnewline"), toks(&["tab", "and", "newline"]));
    }

    #[test]
    fn vocabulary_reserved_ids_and_unknown() {
        let v = Vocabulary::from_tokens(["cat", "dog", "cat"]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.lookup(PAD), PAD_ID);
        assert_eq!(v.lookup(UNK), UNK_ID);
        assert_eq!(v.lookup(MASK), MASK_ID);
        assert_eq!(v.lookup("cat"), 3);
        assert_eq!(v.lookup("zebra"), UNK_ID);
        assert_eq!(v.token(4), Some("dog"));
    }

    #[test]
    fn vocabulary_build_orders_by_frequency() {
        let s1 = toks(&["b", "a", "b"]);
        let s2 = toks(&["c", "a", "b"]);
        let v = Vocabulary::build([s1.as_slice(), s2.as_slice()], 1, None);
        assert_eq!(&v.tokens()[3..], &toks(&["b", "a", "c"])[..]);
        let v = Vocabulary::build([s1.as_slice(), s2.as_slice()], 2, None);
        assert_eq!(v.len(), 5);
        let v = Vocabulary::build([s1.as_slice(), s2.as_slice()], 1, Some(4));
        assert_eq!(v.tokens().last().unwrap(), "b");
    }

    #[test]
    fn label_dict_numeric_and_symbolic() {
        let d = LabelDict::from_observed(["1", "0", "1"]).unwrap();
        assert_eq!(d.id("1"), Some(1));
        let d = LabelDict::from_observed(["1"]).unwrap();
        assert_eq!(d.id("1"), Some(1));
        assert_eq!(d.len(), 2);
        let d = LabelDict::from_observed(["neutral", "entailment", "contradiction"]).unwrap();
        assert_eq!(d.id("contradiction"), Some(0));
        assert_eq!(d.id("neutral"), Some(2));
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(text in "[a-zA-Z.,!? \\t]{0,40}") {
            let once = tokenize(&text);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }
}
