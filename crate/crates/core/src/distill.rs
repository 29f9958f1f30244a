//! The distillation trainer: fit the student's `S_x` to teacher vectors
//! under the cosine loss.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{cosine_loss, cosine_loss_grad, AdamConfig, AdamState, EncoderGrads, SentenceEncoder, StudentEncoder};
use crate::parallel::{map_chunks, map_items, Execution, REDUCTION_CHUNK};
use crate::rng::Rng;
use crate::teacher::TeacherOracle;
use crate::tensor::Tensor;

/// Runs with more skipped samples than this fraction fail.
pub const MAX_SKIP_FRACTION: f64 = 0.01;

const SPLIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_embeddings: bool,
    pub validation_fraction: f64,
    /// Where `best.sra` and `final.sra` are written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    pub execution: Execution,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            freeze_embeddings: false,
            validation_fraction: 0.02,
            checkpoint_dir: None,
            execution: Execution::Sequential,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Parameter(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillHistory {
    pub records: Vec<EpochRecord>,
    /// Training samples skipped over the run because `S_x` or `T_x` was degenerate.
    pub skipped: usize,
    /// Epoch of the lowest validation loss.
    pub best_epoch: Option<usize>,
}

impl DistillHistory {
    pub fn initial_train_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.train_loss)
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.records.iter().filter_map(|r| r.val_loss).min_by(f64::total_cmp)
    }

    /// `epoch,train_loss,val_loss`, with an empty validation column when no
    /// held-out set was used.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for r in &self.records {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{}", r.epoch, r.train_loss, val).expect("writing to a String");
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    /// The encoder after the last epoch.
    pub encoder: StudentEncoder,
    /// The encoder with the lowest validation loss (the final one when there
    /// is no validation set).
    pub best_encoder: StudentEncoder,
    pub history: DistillHistory,
    /// Sentences used for training and validation, after dropping those
    /// with no tokens.
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

struct Sample {
    ids: Vec<u32>,
    target: Vec<f64>,
}

/// Splits `sentences` into seeded train and validation parts: the last
/// `fraction` of a permutation is held out.
pub fn split_validation(sentences: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let perm = Rng::derive(seed, SPLIT_STREAM).permutation(sentences.len());
    let n_val = (sentences.len() as f64 * fraction).floor() as usize;
    let cut = sentences.len() - n_val;
    let pick = |idx: &[usize]| idx.iter().map(|&i| sentences[i].clone()).collect();
    (pick(&perm[..cut]), pick(&perm[cut..]))
}

/// Errors with every uncovered sentence when the teacher cannot supply a
/// target for some of `sentences`.
pub fn check_coverage(oracle: &TeacherOracle, sentences: &[String]) -> Result<()> {
    let mut missing: Vec<String> = sentences.iter().filter(|s| !oracle.covers(s)).cloned().collect();
    missing.dedup();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Coverage { missing })
    }
}

fn prepare(sentences: &[String], vocab: &Vocabulary, oracle: &TeacherOracle, exec: Execution) -> Result<Vec<Sample>> {
    map_items(exec, sentences, |s| {
        Ok(Sample {
            ids: vocab.encode_text(s),
            target: oracle.embed(s)?.into_data(),
        })
    })
    .into_iter()
    .collect()
}

/// Sum of per-sample values in ascending order, so the result does not
/// depend on the input order.
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_loss(encoder: &StudentEncoder, samples: &[Sample], exec: Execution) -> Result<f64> {
    let losses = map_items(exec, samples, |s| {
        let out = encoder.encode(&s.ids)?;
        match cosine_loss(&s.target, out.data()) {
            Ok(l) => Ok(Some(l)),
            Err(Error::DegenerateVector { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    })
    .into_iter()
    .collect::<Result<Vec<Option<f64>>>>()?;
    let kept: Vec<f64> = losses.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::Numeric("every sample has a degenerate vector".into()));
    }
    Ok(order_free_mean(kept))
}

/// Mean cosine loss of `encoder` against the teacher over `held_out`. No
/// parameters change. The mean is independent of the order of `held_out`.
pub fn validate_distill<E: SentenceEncoder + ?Sized>(
    encoder: &E,
    vocab: &Vocabulary,
    oracle: &TeacherOracle,
    held_out: &[String],
) -> Result<f64> {
    if held_out.is_empty() {
        return Err(Error::EmptyInput("validation set is empty"));
    }
    let losses = held_out
        .iter()
        .map(|s| {
            let t = oracle.embed(s)?;
            let out = encoder.encode_ids(&vocab.encode_text(s))?;
            cosine_loss(t.data(), out.data())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(order_free_mean(losses))
}

struct ChunkResult {
    grads: EncoderGrads,
    loss: f64,
    used: usize,
    skipped: usize,
}

fn batch_gradient(encoder: &StudentEncoder, samples: &[Sample], batch: &[usize], exec: Execution) -> Result<ChunkResult> {
    let cfg = encoder.config();
    let parts = map_chunks(exec, batch, REDUCTION_CHUNK, |_, chunk| -> Result<ChunkResult> {
        let mut acc = ChunkResult {
            grads: EncoderGrads::zeros(&cfg),
            loss: 0.0,
            used: 0,
            skipped: 0,
        };
        for &i in chunk {
            let s = &samples[i];
            let trace = encoder.forward_trace(&s.ids)?;
            match cosine_loss_grad(&s.target, &trace.output) {
                Ok((loss, grad)) => {
                    encoder.backward(&trace, Some(&grad), None, &mut acc.grads);
                    acc.loss += loss;
                    acc.used += 1;
                }
                Err(Error::DegenerateVector { .. }) => acc.skipped += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(acc)
    });
    let mut total = ChunkResult {
        grads: EncoderGrads::zeros(&cfg),
        loss: 0.0,
        used: 0,
        skipped: 0,
    };
    for part in parts {
        let part = part?;
        total.grads.add_assign(&part.grads);
        total.loss += part.loss;
        total.used += part.used;
        total.skipped += part.skipped;
    }
    if total.used > 0 {
        total.grads.scale(1.0 / total.used as f64);
    }
    Ok(total)
}

fn grads_finite(g: &[Tensor]) -> bool {
    g.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
}

/// Trains `encoder` so its sentence vectors align with the teacher's.
///
/// Sentences that tokenize to nothing are dropped with a warning. Every
/// remaining sentence must be covered by the teacher; otherwise the whole
/// list of gaps is reported before any training. The returned history has
/// an epoch-0 row for the untrained model followed by one row per epoch,
/// whose training loss is the mean over that epoch's updates.
pub fn distill(
    corpus: &[String],
    vocab: &Vocabulary,
    oracle: &TeacherOracle,
    mut encoder: StudentEncoder,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    let enc_cfg = encoder.config();
    if vocab.len() != enc_cfg.vocab_size {
        return Err(Error::Input(format!(
            "vocabulary has {} entries, encoder expects {}",
            vocab.len(),
            enc_cfg.vocab_size
        )));
    }
    if oracle.dim() != enc_cfg.output_dim {
        return Err(Error::dim("teacher dimension", &[oracle.dim()], &[enc_cfg.output_dim]));
    }
    let usable: Vec<String> = corpus.iter().filter(|s| !tokenize(s).is_empty()).cloned().collect();
    if usable.len() < corpus.len() {
        log::warn!("dropped {} sentence(s) with no tokens", corpus.len() - usable.len());
    }
    if usable.is_empty() {
        return Err(Error::EmptyInput("distillation corpus has no usable sentences"));
    }
    check_coverage(oracle, &usable)?;

    let (train, validation) = split_validation(&usable, cfg.validation_fraction, cfg.seed);
    if train.is_empty() {
        return Err(Error::EmptyInput("no training sentences after the validation split"));
    }
    let train_samples = prepare(&train, vocab, oracle, cfg.execution)?;
    let val_samples = prepare(&validation, vocab, oracle, cfg.execution)?;
    let include_embedding = !cfg.freeze_embeddings;

    let validate = |enc: &StudentEncoder| -> Result<Option<f64>> {
        if val_samples.is_empty() {
            Ok(None)
        } else {
            mean_loss(enc, &val_samples, cfg.execution).map(Some)
        }
    };

    let mut history = DistillHistory::default();
    let initial_val = validate(&encoder)?;
    history.records.push(EpochRecord {
        epoch: 0,
        train_loss: mean_loss(&encoder, &train_samples, cfg.execution)?,
        val_loss: initial_val,
    });
    let mut best_encoder = encoder.clone();
    let mut best_val = initial_val;
    history.best_epoch = initial_val.map(|_| 0);

    let mut adam = {
        let params: Vec<&Tensor> = encoder.trainable_mut(include_embedding).into_iter().map(|t| &*t).collect();
        AdamState::new(AdamConfig::with_lr(cfg.lr), &params)?
    };
    let mut shuffle_rng = Rng::derive(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut used = 0;
        let mut skipped = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = batch_gradient(&encoder, &train_samples, batch, cfg.execution)?;
            skipped += step.skipped;
            if step.used == 0 {
                continue;
            }
            let dense = step.grads.dense(&enc_cfg, include_embedding);
            if !step.loss.is_finite() || !grads_finite(&dense) {
                return Err(Error::Numeric(format!("non-finite loss or gradient at epoch {epoch}, batch {b}")));
            }
            let grefs: Vec<&Tensor> = dense.iter().collect();
            let mut params = encoder.trainable_mut(include_embedding);
            adam.step(&mut params, &grefs)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += step.loss;
            used += step.used;
        }
        history.skipped += skipped;
        if skipped as f64 > MAX_SKIP_FRACTION * train_samples.len() as f64 {
            return Err(Error::Numeric(format!(
                "epoch {epoch} skipped {skipped} of {} samples with degenerate vectors",
                train_samples.len()
            )));
        }
        if used == 0 {
            return Err(Error::Numeric(format!("epoch {epoch} had no usable samples")));
        }
        let val_loss = validate(&encoder)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / used as f64,
            val_loss,
        });
        log::info!("epoch {epoch}: train {:.6} val {:?}", loss_sum / used as f64, val_loss);
        if let Some(v) = val_loss {
            if best_val.is_none_or(|b| v < b) {
                best_val = Some(v);
                best_encoder = encoder.clone();
                history.best_epoch = Some(epoch);
            }
        }
    }
    if val_samples.is_empty() {
        best_encoder = encoder.clone();
    }

    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        let meta = |which: &str| {
            vec![
                ("checkpoint".to_string(), which.to_string()),
                ("seed".to_string(), cfg.seed.to_string()),
                ("epochs".to_string(), cfg.epochs.to_string()),
                ("teacher_digest".to_string(), oracle.digest()),
            ]
        };
        Checkpoint::distilled(&best_encoder, vocab, meta("best"))?.save(&dir.join("best.sra"))?;
        Checkpoint::distilled(&encoder, vocab, meta("final"))?.save(&dir.join("final.sra"))?;
        std::fs::write(dir.join("history.csv"), history.to_csv())?;
    }

    Ok(DistillOutcome {
        encoder,
        best_encoder,
        history,
        train,
        validation,
    })
}
