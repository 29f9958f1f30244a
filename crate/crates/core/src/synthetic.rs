//! Seeded toy corpora for offline runs: a fixed word list, random sentences,
//! a single-sentence task labeled through the synthetic teacher and a
//! paraphrase pair set.

use crate::data::{augment_mask, tokenize, LabeledExample, Vocabulary, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::teacher::TeacherOracle;
use crate::tensor::dot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CorpusConfig {
    /// Number of content words; the vocabulary adds the reserved tokens.
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for CorpusConfig {
    /// 97 words, so the vocabulary has exactly 100 entries.
    fn default() -> Self {
        CorpusConfig {
            words: 100 - RESERVED_TOKENS.len(),
            min_len: 3,
            max_len: 10,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.words == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Parameter(format!("invalid corpus configuration {self:?}")));
        }
        Ok(())
    }

    pub fn word(&self, i: usize) -> String {
        format!("w{i}")
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens((0..self.words).map(|i| self.word(i))).expect("generated words are non-empty")
    }
}

/// `n` sentences with uniform lengths in `[min_len, max_len]` and uniform
/// words.
pub fn synthetic_corpus(n: usize, cfg: &CorpusConfig, rng: &mut Rng) -> Result<Vec<String>> {
    cfg.validate()?;
    Ok((0..n)
        .map(|_| {
            let len = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
            (0..len).map(|_| cfg.word(rng.below(cfg.words))).collect::<Vec<_>>().join(" ")
        })
        .collect())
}

/// Labels each sentence by whether its teacher vector projects onto a random
/// direction above the median projection. Classes are balanced up to ties.
pub fn synthetic_single_task(sentences: &[String], teacher: &TeacherOracle, rng: &mut Rng) -> Result<Vec<LabeledExample>> {
    if sentences.is_empty() {
        return Err(Error::EmptyInput("synthetic task needs sentences"));
    }
    let direction: Vec<f64> = (0..teacher.dim()).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let scores = sentences
        .iter()
        .map(|s| Ok(dot(teacher.embed(s)?.data(), &direction)))
        .collect::<Result<Vec<f64>>>()?;
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok(sentences
        .iter()
        .zip(&scores)
        .map(|(s, &score)| LabeledExample::single(s.clone(), Some(usize::from(score >= median))))
        .collect())
}

/// Half positives (a sentence paired with a masked copy of itself) and half
/// negatives (two distinct random sentences), shuffled. Label 1 marks a
/// paraphrase.
pub fn synthetic_paraphrase_pairs(
    sentences: &[String],
    n_pairs: usize,
    p_mask: f64,
    rng: &mut Rng,
) -> Result<Vec<LabeledExample>> {
    if sentences.len() < 2 {
        return Err(Error::EmptyInput("paraphrase pairs need at least two sentences"));
    }
    let mut out = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let a = &sentences[rng.below(sentences.len())];
        if i % 2 == 0 {
            let masked = augment_mask(&tokenize(a), p_mask, rng).join(" ");
            out.push(LabeledExample::pair(a.clone(), masked, Some(1)));
        } else {
            let mut b = &sentences[rng.below(sentences.len())];
            while b == a {
                b = &sentences[rng.below(sentences.len())];
            }
            out.push(LabeledExample::pair(a.clone(), b.clone(), Some(0)));
        }
    }
    rng.shuffle(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::SyntheticTeacher;

    #[test]
    fn default_vocabulary_has_one_hundred_entries() {
        assert_eq!(CorpusConfig::default().vocabulary().len(), 100);
    }

    #[test]
    fn corpus_lengths_and_words() {
        let cfg = CorpusConfig::default();
        let corpus = synthetic_corpus(200, &cfg, &mut Rng::new(1)).unwrap();
        let vocab = cfg.vocabulary();
        for s in &corpus {
            let toks = tokenize(s);
            assert!((3..=10).contains(&toks.len()));
            assert!(toks.iter().all(|t| vocab.get(t).is_some()));
        }
        assert_eq!(corpus, synthetic_corpus(200, &cfg, &mut Rng::new(1)).unwrap());
    }

    #[test]
    fn single_task_is_balanced() {
        let corpus = synthetic_corpus(101, &CorpusConfig::default(), &mut Rng::new(2)).unwrap();
        let teacher = TeacherOracle::Synthetic(SyntheticTeacher::new(3, 16, 16).unwrap());
        let task = synthetic_single_task(&corpus, &teacher, &mut Rng::new(4)).unwrap();
        let positives = task.iter().filter(|e| e.label == Some(1)).count();
        assert_eq!(positives, 51);
    }

    #[test]
    fn paraphrase_pairs_are_half_positive() {
        let corpus = synthetic_corpus(50, &CorpusConfig::default(), &mut Rng::new(2)).unwrap();
        let pairs = synthetic_paraphrase_pairs(&corpus, 40, 0.2, &mut Rng::new(5)).unwrap();
        assert_eq!(pairs.iter().filter(|e| e.label == Some(1)).count(), 20);
        assert!(pairs.iter().filter(|e| e.label == Some(0)).all(|e| e.text_a != *e.text_b.as_ref().unwrap()));
    }
}
