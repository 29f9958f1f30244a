//! Rule-based transfer-set augmentation: token masking and n-gram sampling.

use super::{tokenize, LabeledExample, MASK};
use crate::error::{Error, Result};
use crate::parallel::{map_items, Execution};
use crate::rng::Rng;

pub const DEFAULT_P_MASK: f64 = 0.1;
/// Transfer sets stop growing at this many samples.
pub const TRANSFER_SET_CAP: usize = 800_000;

/// Replaces each token with `[MASK]` independently with probability `p_mask`.
pub fn augment_mask(tokens: &[String], p_mask: f64, rng: &mut Rng) -> Vec<String> {
    tokens
        .iter()
        .map(|t| if rng.bernoulli(p_mask) { MASK.to_string() } else { t.clone() })
        .collect()
}

/// A contiguous n-gram with `n` uniform in `n_range` (inclusive) clamped to
/// the sentence length, starting at a uniform position.
pub fn augment_ngram(tokens: &[String], rng: &mut Rng, n_range: (usize, usize)) -> Result<Vec<String>> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("n-gram sampling needs at least one token"));
    }
    let (lo, hi) = n_range;
    if lo == 0 || lo > hi {
        return Err(Error::Parameter(format!("invalid n-gram range [{lo}, {hi}]")));
    }
    let n = (lo + rng.below(hi - lo + 1)).min(tokens.len());
    let start = rng.below(tokens.len() - n + 1);
    Ok(tokens[start..start + n].to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub multiplier: usize,
    pub cap: usize,
    pub p_mask: f64,
    pub ngram_min: usize,
    pub ngram_max: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            multiplier: 1,
            cap: TRANSFER_SET_CAP,
            p_mask: DEFAULT_P_MASK,
            ngram_min: 1,
            ngram_max: 5,
        }
    }
}

fn variant(text: &str, cfg: &AugmentConfig, rng: &mut Rng) -> Result<String> {
    let mut tokens = tokenize(text);
    if rng.bernoulli(0.5) {
        tokens = augment_mask(&tokens, cfg.p_mask, rng);
    }
    if rng.bernoulli(0.5) && !tokens.is_empty() {
        tokens = augment_ngram(&tokens, rng, (cfg.ngram_min, cfg.ngram_max))?;
    }
    Ok(tokens.join(" "))
}

/// The originals followed by augmented variants, round by round, stopping at
/// `min(n * multiplier, cap)` samples. Each variant applies masking and then
/// n-gram sampling, each with probability 0.5; pair examples augment both
/// sides independently. Outputs are unlabeled.
///
/// Variant `i` draws from a generator derived from `(master, i)` where
/// `master` comes from `rng`, so the result does not depend on `exec`.
pub fn build_transfer_set(
    examples: &[LabeledExample],
    cfg: &AugmentConfig,
    rng: &mut Rng,
    exec: Execution,
) -> Result<Vec<LabeledExample>> {
    if cfg.multiplier < 1 {
        return Err(Error::Parameter("transfer-set multiplier must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.p_mask) {
        return Err(Error::Parameter(format!("p_mask must lie in [0, 1], got {}", cfg.p_mask)));
    }
    let master = rng.next_u64();
    let n = examples.len();
    let total = n.saturating_mul(cfg.multiplier).min(cfg.cap);
    let indices: Vec<usize> = (0..total).collect();
    map_items(exec, &indices, |&i| {
        let ex = &examples[i % n];
        if i < n {
            return Ok(LabeledExample {
                label: None,
                ..ex.clone()
            });
        }
        let mut r = Rng::derive(master, i as u64);
        let text_a = variant(&ex.text_a, cfg, &mut r)?;
        let text_b = ex.text_b.as_deref().map(|b| variant(b, cfg, &mut r)).transpose()?;
        Ok(LabeledExample {
            text_a,
            text_b,
            label: None,
        })
    })
    .into_iter()
    .collect()
}
