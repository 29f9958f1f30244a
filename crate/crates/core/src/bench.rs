//! Parameter accounting and inference-throughput timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, Parameters, StudentEncoder};

/// Total element count of a model's tensors, optionally without the
/// embedding table.
pub fn count_parameters<P: Parameters + ?Sized>(model: &P, exclude_embeddings: bool) -> usize {
    model
        .named_parameters()
        .iter()
        .filter(|(name, _)| !(exclude_embeddings && name.ends_with("embedding")))
        .map(|(_, t)| t.len())
        .sum()
}

/// Closed-form parameter count of the encoder and an optional head
/// `(input, hidden widths, classes)`.
pub fn closed_form_parameters(
    cfg: &EncoderConfig,
    head: Option<(usize, &[usize], usize)>,
    include_embeddings: bool,
) -> usize {
    let (v, e, h, d) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.output_dim);
    let mut total = 2 * 4 * (h * (e + h) + h) + 2 * h * d;
    if include_embeddings {
        total += v * e;
    }
    if let Some((input, hidden, classes)) = head {
        let mut prev = input;
        for &w in hidden.iter().chain(std::iter::once(&classes)) {
            total += prev * w + w;
            prev = w;
        }
    }
    total
}

/// A frozen model that can run forward passes over batches of token ids.
pub trait Inference: Sync {
    fn infer_batch(&self, rows: &[&[u32]]) -> Result<()>;
}

impl Inference for StudentEncoder {
    fn infer_batch(&self, rows: &[&[u32]]) -> Result<()> {
        let out = self.encode_batch(rows)?;
        std::hint::black_box(out);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub sentences: usize,
    pub batch_size: usize,
    pub repeats: usize,
    /// Median wall-clock seconds of one full pass.
    pub seconds: f64,
    pub sentences_per_second: f64,
    pub all_seconds: Vec<f64>,
}

/// Times forward passes over `dataset` in batches. One warm-up batch runs
/// before the clock starts; the reported time is the median of `repeats`
/// full passes.
pub fn time_inference<M: Inference + ?Sized>(
    model: &M,
    dataset: &[Vec<u32>],
    batch_size: usize,
    repeats: usize,
) -> Result<TimingReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("timing needs at least one sentence"));
    }
    if batch_size == 0 || repeats == 0 {
        return Err(Error::Parameter("batch size and repeats must be at least 1".into()));
    }
    let rows: Vec<&[u32]> = dataset.iter().map(Vec::as_slice).collect();
    model.infer_batch(&rows[..batch_size.min(rows.len())])?;
    let mut all = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for batch in rows.chunks(batch_size) {
            model.infer_batch(batch)?;
        }
        all.push(start.elapsed().as_secs_f64());
    }
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let seconds = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok(TimingReport {
        sentences: dataset.len(),
        batch_size,
        repeats,
        seconds,
        sentences_per_second: if seconds > 0.0 { dataset.len() as f64 / seconds } else { f64::INFINITY },
        all_seconds: all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;
    use crate::finetune::{FeatureSource, TaskModel};
    use crate::rng::Rng;

    #[test]
    fn paper_configuration_counts() {
        let cfg = EncoderConfig::paper(10);
        assert_eq!(closed_form_parameters(&cfg, None, false), 4_116_480);
        let head = (4 * 768, &[256usize][..], 2);
        assert_eq!(closed_form_parameters(&cfg, Some(head), false), 4_903_682);
    }

    #[test]
    fn counter_matches_closed_form_on_a_grid() {
        for e in [1, 2, 5] {
            for h in [1, 3, 4] {
                for d in [1, 2, 6] {
                    let cfg = EncoderConfig {
                        vocab_size: 7,
                        embed_dim: e,
                        hidden_dim: h,
                        output_dim: d,
                    };
                    let enc = StudentEncoder::new(cfg, &mut Rng::new(1)).unwrap();
                    assert_eq!(count_parameters(&enc, true), closed_form_parameters(&cfg, None, false));
                    assert_eq!(count_parameters(&enc, false), closed_form_parameters(&cfg, None, true));
                    let m = TaskModel::new(enc, TaskKind::Pair, FeatureSource::Sentence, &[3], 2, &mut Rng::new(2)).unwrap();
                    let head = (4 * d, &[3usize][..], 2);
                    assert_eq!(count_parameters(&m, true), closed_form_parameters(&cfg, Some(head), false));
                }
            }
        }
    }

    #[test]
    fn embedding_flag_adds_v_times_e() {
        let cfg = EncoderConfig {
            vocab_size: 10,
            embed_dim: 2,
            hidden_dim: 2,
            output_dim: 2,
        };
        let enc = StudentEncoder::new(cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(count_parameters(&enc, false) - count_parameters(&enc, true), 20);
    }

    struct NoOp;
    impl Inference for NoOp {
        fn infer_batch(&self, _rows: &[&[u32]]) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn timing_of_a_no_op_model_is_near_zero() {
        let data = vec![vec![3u32, 4]; 5000];
        let r = time_inference(&NoOp, &data, 1024, 3).unwrap();
        assert!(r.seconds < 1e-3, "{}", r.seconds);
        assert_eq!(r.sentences, 5000);
        assert_eq!(time_inference(&NoOp, &data, 1024, 3).unwrap().sentences, r.sentences);
        assert!(matches!(time_inference(&NoOp, &[], 1, 1), Err(Error::EmptyInput(_))));
    }
}
