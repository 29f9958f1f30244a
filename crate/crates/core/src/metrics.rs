//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(preds: &[usize], golds: &[usize]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Input("metrics need at least one example".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// F1 of `positive_class` over binary labels; 0 when precision and recall
/// are both 0.
pub fn f1_binary(preds: &[usize], golds: &[usize], positive_class: usize) -> Result<f64> {
    check_lengths(preds, golds)?;
    if positive_class > 1 || preds.iter().chain(golds).any(|&l| l > 1) {
        return Err(Error::Input("f1_binary expects labels in {0, 1}".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&p, &g) in preds.iter().zip(golds) {
        match (p == positive_class, g == positive_class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    /// Present for binary tasks.
    pub f1: Option<f64>,
    pub positive_class: Option<usize>,
    /// Gold examples per class.
    pub support: Vec<usize>,
    pub total: usize,
}

impl MetricReport {
    /// Accuracy always; F1 when `num_classes == 2`, with class 1 positive.
    pub fn compute(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<Self> {
        let acc = accuracy(preds, golds)?;
        if let Some(&bad) = preds.iter().chain(golds).find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label: bad,
                classes: num_classes,
            });
        }
        let mut support = vec![0; num_classes];
        for &g in golds {
            support[g] += 1;
        }
        let (f1, positive_class) = if num_classes == 2 {
            (Some(f1_binary(preds, golds, 1)?), Some(1))
        } else {
            (None, None)
        };
        Ok(MetricReport {
            accuracy: acc,
            f1,
            positive_class,
            support,
            total: golds.len(),
        })
    }

    /// Accuracy of always predicting the most frequent gold class.
    pub fn majority_baseline(&self) -> f64 {
        *self.support.iter().max().unwrap_or(&0) as f64 / self.total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::Input(_))));
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_binary(&[1, 0, 1], &[1, 0, 1], 1).unwrap(), 1.0);
        let f1 = f1_binary(&[1, 1], &[1, 0], 1).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_binary(&[0, 0], &[1, 0], 1).unwrap(), 0.0);
        assert!(f1_binary(&[0], &[0, 1], 1).is_err());
    }

    #[test]
    fn report_and_baseline() {
        let r = MetricReport::compute(&[1, 1, 0, 1], &[1, 0, 0, 0], 2).unwrap();
        assert_eq!(r.support, vec![3, 1]);
        assert_eq!(r.majority_baseline(), 0.75);
        assert_eq!(r.f1, Some(0.5));
        let r = MetricReport::compute(&[2, 1], &[2, 0], 3).unwrap();
        assert_eq!(r.f1, None);
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(
            pairs in proptest::collection::vec((0usize..2, 0usize..2), 1..40),
            seed in 0u64..1000,
        ) {
            let (p, g): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let perm = crate::rng::Rng::new(seed).permutation(p.len());
            let pp: Vec<usize> = perm.iter().map(|&i| p[i]).collect();
            let gp: Vec<usize> = perm.iter().map(|&i| g[i]).collect();
            prop_assert_eq!(accuracy(&p, &g).unwrap(), accuracy(&pp, &gp).unwrap());
            prop_assert_eq!(f1_binary(&p, &g, 1).unwrap(), f1_binary(&pp, &gp, 1).unwrap());
        }
    }
}
