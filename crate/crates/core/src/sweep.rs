//! Data-fraction and distillation-corpus-size sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{LabeledExample, TaskKind, Vocabulary};
use crate::distill::{distill, validate_distill, DistillConfig};
use crate::error::{Error, Result};
use crate::finetune::{finetune, FinetuneConfig, TaskModel, ENCODER_STREAM, HEAD_STREAM};
use crate::nn::{EncoderConfig, StudentEncoder};
use crate::parallel::{map_items, Execution};
use crate::rng::Rng;
use crate::teacher::TeacherOracle;

const FRACTION_STREAM: u64 = 0x4652_4143;

/// A labeled downstream task and how to fine-tune on it.
#[derive(Clone, Debug)]
pub struct DownstreamTask<'a> {
    pub train: &'a [LabeledExample],
    pub dev: &'a [LabeledExample],
    pub vocab: &'a Vocabulary,
    pub kind: TaskKind,
    pub num_classes: usize,
    pub finetune: FinetuneConfig,
}

/// How the encoder of a fine-tuning run starts.
#[derive(Clone, Debug)]
pub enum Init {
    Distilled(Checkpoint),
    Random(EncoderConfig),
}

impl Init {
    pub fn name(&self) -> &'static str {
        match self {
            Init::Distilled(_) => "distilled",
            Init::Random(_) => "random",
        }
    }

    /// The task model a run with `seed` starts from. The head always comes
    /// from the seed; a random encoder does too.
    pub fn build(&self, task: &DownstreamTask<'_>, seed: u64) -> Result<TaskModel> {
        let ft = &task.finetune;
        match self {
            Init::Distilled(ck) => {
                TaskModel::from_checkpoint(ck, task.kind, ft.features, &ft.head_hidden, task.num_classes, seed)
            }
            Init::Random(cfg) => {
                let enc = StudentEncoder::new(*cfg, &mut Rng::derive(seed, ENCODER_STREAM))?;
                TaskModel::new(
                    enc,
                    task.kind,
                    ft.features,
                    &ft.head_hidden,
                    task.num_classes,
                    &mut Rng::derive(seed, HEAD_STREAM),
                )
            }
        }
    }
}

/// Runs a plain fine-tune from `init` with the given seed.
pub fn finetune_from(init: &Init, task: &DownstreamTask<'_>, train: &[LabeledExample], seed: u64) -> Result<crate::finetune::FinetuneOutcome> {
    let model = init.build(task, seed)?;
    let cfg = FinetuneConfig {
        seed,
        ..task.finetune.clone()
    };
    finetune(&model, train, task.dev, task.vocab, &cfg, None)
}

/// The first `ceil(fraction * n)` examples of a seeded permutation, kept in
/// their original order. Fraction 1 returns the input unchanged.
pub fn fraction_subset(examples: &[LabeledExample], fraction: f64, seed: u64) -> Result<Vec<LabeledExample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Input(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let n = (fraction * examples.len() as f64).ceil() as usize;
    let mut idx = Rng::derive(seed, FRACTION_STREAM).permutation(examples.len());
    idx.truncate(n);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| examples[i].clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub fraction: f64,
    pub init: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
}

/// Fine-tunes every (fraction, init, seed) cell for a fixed number of epochs
/// with no early stopping and records the dev metric after each epoch. The
/// task's fine-tune config must have a single learning rate.
pub fn data_fraction_sweep(
    task: &DownstreamTask<'_>,
    fractions: &[f64],
    inits: &[Init],
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<FractionRow>> {
    if task.finetune.lr_grid.len() != 1 {
        return Err(Error::Parameter("the data-fraction sweep uses exactly one learning rate".into()));
    }
    let task = DownstreamTask {
        finetune: FinetuneConfig {
            patience: None,
            ..task.finetune.clone()
        },
        ..task.clone()
    };
    let mut cells = Vec::new();
    for &f in fractions {
        for &s in seeds {
            let subset = fraction_subset(task.train, f, s)?;
            let classes: std::collections::HashSet<_> = subset.iter().filter_map(|e| e.label).collect();
            if subset.len() < task.num_classes || classes.len() < task.num_classes.min(2) {
                return Err(Error::Input(format!(
                    "fraction {f} leaves {} examples, fewer than needed for {} classes",
                    subset.len(),
                    task.num_classes
                )));
            }
            for (i, _) in inits.iter().enumerate() {
                cells.push((f, i, s, subset.clone()));
            }
        }
    }
    // Each cell is independent; nested runs stay sequential inside a cell.
    let results = map_items(exec, &cells, |(f, i, s, subset)| -> Result<Vec<FractionRow>> {
        let out = finetune_from(&inits[*i], &task, subset, *s)?;
        Ok(out
            .report
            .rows
            .iter()
            .map(|r| FractionRow {
                fraction: *f,
                init: inits[*i].name().to_string(),
                seed: *s,
                epoch: r.epoch,
                train_loss: r.train_loss,
                dev_metric: r.dev_metric,
            })
            .collect())
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    rows.sort_by(|a, b| {
        a.fraction
            .total_cmp(&b.fraction)
            .then_with(|| a.init.cmp(&b.init))
            .then(a.seed.cmp(&b.seed))
            .then(a.epoch.cmp(&b.epoch))
    });
    Ok(rows)
}

pub fn fraction_rows_csv(rows: &[FractionRow]) -> String {
    let mut out = String::from("fraction,init,seed,epoch,train_loss,dev_metric\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.fraction, r.init, r.seed, r.epoch, r.train_loss, r.dev_metric)
            .expect("writing to a String");
    }
    out
}

/// Mean dev metric over seeds per (fraction, init, epoch):
/// `fraction,init,epoch,mean_dev_metric`.
pub fn fraction_plot_csv(rows: &[FractionRow]) -> String {
    let mut groups: BTreeMap<(u64, String, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = groups.entry((r.fraction.to_bits(), r.init.clone(), r.epoch)).or_default();
        e.0 += r.dev_metric;
        e.1 += 1;
    }
    let mut out = String::from("fraction,init,epoch,mean_dev_metric\n");
    for ((f, init, epoch), (sum, n)) in groups {
        writeln!(out, "{},{init},{epoch},{}", f64::from_bits(f), sum / n as f64).expect("writing to a String");
    }
    out
}

/// Mean over seeds of the last-epoch dev metric for one (fraction, init)
/// cell.
pub fn mean_final_metric(rows: &[FractionRow], fraction: f64, init: &str) -> Option<f64> {
    let last = rows
        .iter()
        .filter(|r| r.fraction == fraction && r.init == init)
        .map(|r| r.epoch)
        .max()?;
    let finals: Vec<f64> = rows
        .iter()
        .filter(|r| r.fraction == fraction && r.init == init && r.epoch == last)
        .map(|r| r.dev_metric)
        .collect();
    Some(finals.iter().sum::<f64>() / finals.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub size: usize,
    /// Absent for the undistilled baseline (size 0).
    pub val_loss: Option<f64>,
    pub dev_metric: Option<f64>,
}

/// Distills from each prefix `corpus[..size]` starting from the same seeded
/// encoder, records the cosine loss on the common `validation` set and, with
/// a downstream task, the best dev score after fine-tuning from the
/// distilled encoder. Size 0 is the undistilled baseline.
pub fn distill_size_sweep(
    corpus: &[String],
    validation: &[String],
    vocab: &Vocabulary,
    oracle: &TeacherOracle,
    encoder_cfg: EncoderConfig,
    sizes: &[usize],
    cfg: &DistillConfig,
    downstream: Option<&DownstreamTask<'_>>,
) -> Result<Vec<SizeRow>> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Input("corpus sizes must be ascending".into()));
    }
    if let Some(&too_big) = sizes.iter().find(|&&s| s > corpus.len()) {
        return Err(Error::Input(format!("size {too_big} exceeds the corpus of {} sentences", corpus.len())));
    }
    let cfg = DistillConfig {
        validation_fraction: 0.0,
        checkpoint_dir: None,
        ..cfg.clone()
    };
    let initial = StudentEncoder::new(encoder_cfg, &mut Rng::derive(cfg.seed, ENCODER_STREAM))?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let (encoder, val_loss) = if size == 0 {
            (initial.clone(), None)
        } else {
            let out = distill(&corpus[..size], vocab, oracle, initial.clone(), &cfg)?;
            let loss = validate_distill(&out.encoder, vocab, oracle, validation)?;
            (out.encoder, Some(loss))
        };
        let dev_metric = match downstream {
            None => None,
            Some(task) => {
                let ck = Checkpoint::distilled(&encoder, vocab, vec![])?;
                let out = finetune_from(&Init::Distilled(ck), task, task.train, cfg.seed)?;
                Some(out.report.best_score.primary)
            }
        };
        rows.push(SizeRow {
            size,
            val_loss,
            dev_metric,
        });
    }
    Ok(rows)
}

/// `size,val_loss,dev_metric`; absent values are empty cells, or `NaN`
/// when `plot` is set.
pub fn size_rows_csv(rows: &[SizeRow], plot: bool) -> String {
    let missing = if plot { "NaN" } else { "" };
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| missing.to_string());
    let mut out = String::from("size,val_loss,dev_metric\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.size, cell(r.val_loss), cell(r.dev_metric)).expect("writing to a String");
    }
    out
}
