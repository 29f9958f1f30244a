//! Task models on top of the student encoder, fine-tuning with a
//! learning-rate grid and untuned similarity evaluation.
//!
//! Heads read the sentence vector `S_x` by default; [`FeatureSource::Hidden`]
//! switches them to the BiLSTM state `H`. Pair models run both sentences
//! through one encoder and feed `[u, v, |u - v|, u * v]` to the head.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::data::{LabelDict, LabeledExample, TaskKind, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::nn::{
    cross_entropy_grad, mse_grad, softmax, AdamConfig, AdamState, EncoderGrads, EncoderTrace, MlpHead, Parameters,
    StudentEncoder, DEFAULT_HEAD_WIDTH, MIN_NORM,
};
use crate::parallel::{map_chunks, map_items, Execution, REDUCTION_CHUNK};
use crate::rng::Rng;
use crate::teacher::{pair_id, sentence_id, TeacherLogits};
use crate::tensor::{dot, Tensor};

/// Stream of the run seed used to initialize task heads.
pub const HEAD_STREAM: u64 = 0x4845_4144;
/// Stream of the run seed used to initialize encoders from scratch.
pub const ENCODER_STREAM: u64 = 0x454e_435f;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// `S_x`, dimension `d`.
    #[default]
    Sentence,
    /// `H`, dimension `2h`.
    Hidden,
}

impl FeatureSource {
    pub fn dim(self, encoder: &StudentEncoder) -> usize {
        let cfg = encoder.config();
        match self {
            FeatureSource::Sentence => cfg.output_dim,
            FeatureSource::Hidden => 2 * cfg.hidden_dim,
        }
    }
}

impl std::str::FromStr for FeatureSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(FeatureSource::Sentence),
            "hidden" => Ok(FeatureSource::Hidden),
            other => Err(Error::Input(format!("unknown feature source {other:?}; expected sentence or hidden"))),
        }
    }
}

fn kind_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Single => "single",
        TaskKind::Pair => "pair",
    }
}

fn feature_name(f: FeatureSource) -> &'static str {
    match f {
        FeatureSource::Sentence => "sentence",
        FeatureSource::Hidden => "hidden",
    }
}

/// `[h, h2, |h - h2|, h * h2]`.
pub fn pair_features(h: &Tensor, h2: &Tensor) -> Result<Tensor> {
    if h.rank() != 1 || h.shape() != h2.shape() {
        return Err(Error::dim("pair_features", h.shape(), h2.shape()));
    }
    Tensor::vector(pair_features_raw(h.data(), h2.data()))
}

pub(crate) fn pair_features_raw(u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * u.len());
    out.extend_from_slice(u);
    out.extend_from_slice(v);
    out.extend(u.iter().zip(v).map(|(a, b)| (a - b).abs()));
    out.extend(u.iter().zip(v).map(|(a, b)| a * b));
    out
}

/// Gradients of the pair features with respect to both inputs. The
/// absolute value uses subgradient 0 at equality.
pub(crate) fn pair_features_backward(u: &[f64], v: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = u.len();
    let (g1, rest) = g.split_at(m);
    let (g2, rest) = rest.split_at(m);
    let (g3, g4) = rest.split_at(m);
    let mut du = vec![0.0; m];
    let mut dv = vec![0.0; m];
    for i in 0..m {
        let sign = if u[i] > v[i] {
            1.0
        } else if u[i] < v[i] {
            -1.0
        } else {
            0.0
        };
        du[i] = g1[i] + sign * g3[i] + v[i] * g4[i];
        dv[i] = g2[i] - sign * g3[i] + u[i] * g4[i];
    }
    (du, dv)
}

/// An encoder plus a classification head. Pair models hold a single encoder
/// that both sentences go through.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    encoder: StudentEncoder,
    head: MlpHead,
    kind: TaskKind,
    features: FeatureSource,
}

/// Gradients mirroring a [`TaskModel`].
#[derive(Clone, Debug)]
pub struct TaskGrads {
    pub encoder: EncoderGrads,
    pub head: MlpHead,
}

impl TaskGrads {
    fn zeros(model: &TaskModel) -> Self {
        TaskGrads {
            encoder: EncoderGrads::zeros(&model.encoder.config()),
            head: model.head.zeros_like(),
        }
    }

    fn add_assign(&mut self, other: &TaskGrads) {
        self.encoder.add_assign(&other.encoder);
        self.head.add_assign(&other.head);
    }

    fn scale(&mut self, c: f64) {
        self.encoder.scale(c);
        self.head.scale(c);
    }

    /// Dense tensors aligned with [`TaskModel::parameters_mut`].
    pub fn dense(&self, model: &TaskModel) -> Vec<Tensor> {
        let mut out = self.encoder.dense(&model.encoder.config(), true);
        out.extend(self.head.named_parameters().into_iter().map(|(_, t)| t.clone()));
        out
    }
}

impl TaskModel {
    /// Expected head input width for this encoder, task kind and feature
    /// source.
    pub fn head_input_dim(encoder: &StudentEncoder, kind: TaskKind, features: FeatureSource) -> usize {
        let m = features.dim(encoder);
        match kind {
            TaskKind::Single => m,
            TaskKind::Pair => 4 * m,
        }
    }

    /// Wraps `encoder` with a freshly initialized head.
    pub fn new(
        encoder: StudentEncoder,
        kind: TaskKind,
        features: FeatureSource,
        head_hidden: &[usize],
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let input = Self::head_input_dim(&encoder, kind, features);
        let head = MlpHead::new(input, head_hidden, num_classes, rng)?;
        Self::from_parts(encoder, head, kind, features)
    }

    pub fn from_parts(encoder: StudentEncoder, head: MlpHead, kind: TaskKind, features: FeatureSource) -> Result<Self> {
        let want = Self::head_input_dim(&encoder, kind, features);
        if head.input_dim() != want {
            return Err(Error::dim("task head input", &[head.input_dim()], &[want]));
        }
        Ok(TaskModel {
            encoder,
            head,
            kind,
            features,
        })
    }

    /// Inherits the encoder of a checkpoint bit-exactly and initializes a
    /// new head from `seed`.
    pub fn from_checkpoint(
        checkpoint: &Checkpoint,
        kind: TaskKind,
        features: FeatureSource,
        head_hidden: &[usize],
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::new(
            checkpoint.encoder()?,
            kind,
            features,
            head_hidden,
            num_classes,
            &mut Rng::derive(seed, HEAD_STREAM),
        )
    }

    /// Restores a fine-tuned checkpoint, head included.
    pub fn from_finetuned(checkpoint: &Checkpoint) -> Result<Self> {
        let head = checkpoint
            .head()?
            .ok_or_else(|| Error::format("checkpoint", None, "checkpoint has no task head"))?;
        let kind = checkpoint
            .meta_value("task")
            .ok_or_else(|| Error::format("checkpoint", None, "missing task kind"))?
            .parse()?;
        let features = checkpoint.meta_value("features").unwrap_or("sentence").parse()?;
        Self::from_parts(checkpoint.encoder()?, head, kind, features)
    }

    pub fn to_checkpoint(
        &self,
        parent_digest: Option<String>,
        vocabulary: &Vocabulary,
        labels: &LabelDict,
        mut meta: Vec<(String, String)>,
    ) -> Result<Checkpoint> {
        meta.insert(0, ("task".into(), kind_name(self.kind).into()));
        meta.insert(1, ("features".into(), feature_name(self.features).into()));
        let ck = Checkpoint::finetuned(&self.encoder, &self.head, parent_digest, vocabulary, labels, meta)?;
        debug_assert_eq!(ck.stage, Stage::Finetuned);
        Ok(ck)
    }

    pub fn encoder(&self) -> &StudentEncoder {
        &self.encoder
    }

    /// The encoder applied to sentence `side` (0 or 1) of a pair. Both sides
    /// return the same object.
    pub fn encoder_for_side(&self, side: usize) -> &StudentEncoder {
        debug_assert!(side < 2);
        &self.encoder
    }

    pub fn head(&self) -> &MlpHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut MlpHead {
        &mut self.head
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn features(&self) -> FeatureSource {
        self.features
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    fn rep<'t>(&self, trace: &'t EncoderTrace) -> &'t [f64] {
        match self.features {
            FeatureSource::Sentence => &trace.output,
            FeatureSource::Hidden => &trace.hidden,
        }
    }

    fn check_kind(&self, b: Option<&[u32]>) -> Result<()> {
        match (self.kind, b.is_some()) {
            (TaskKind::Single, false) | (TaskKind::Pair, true) => Ok(()),
            (TaskKind::Single, true) => Err(Error::Input("single-sentence model given a pair".into())),
            (TaskKind::Pair, false) => Err(Error::Input("pair model given a single sentence".into())),
        }
    }

    /// Class logits for one example.
    pub fn logits(&self, a: &[u32], b: Option<&[u32]>) -> Result<Vec<f64>> {
        self.check_kind(b)?;
        let ta = self.encoder.forward_trace(a)?;
        let features = match b {
            None => self.rep(&ta).to_vec(),
            Some(b) => {
                let tb = self.encoder.forward_trace(b)?;
                pair_features_raw(self.rep(&ta), self.rep(&tb))
            }
        };
        Ok(self.head.forward_trace(&features)?.logits)
    }

    /// Loss of one example (cross-entropy plus `alpha` times the logit MSE
    /// when teacher logits are given), accumulating gradients into `grads`.
    fn accumulate(
        &self,
        a: &[u32],
        b: Option<&[u32]>,
        label: usize,
        teacher: Option<(&[f64], f64)>,
        grads: &mut TaskGrads,
    ) -> Result<f64> {
        self.check_kind(b)?;
        let ta = self.encoder.forward_trace(a)?;
        let tb = b.map(|b| self.encoder.forward_trace(b)).transpose()?;
        let features = match &tb {
            None => self.rep(&ta).to_vec(),
            Some(tb) => pair_features_raw(self.rep(&ta), self.rep(tb)),
        };
        let mlp = self.head.forward_trace(&features)?;
        let (mut loss, mut d_logits) = cross_entropy_grad(&mlp.logits, label)?;
        if let Some((t, alpha)) = teacher {
            let (mse, g) = mse_grad(&mlp.logits, t)?;
            loss += alpha * mse;
            d_logits.iter_mut().zip(&g).for_each(|(d, gi)| *d += alpha * gi);
        }
        let d_features = self.head.backward(&mlp, &d_logits, &mut grads.head);
        let mut push = |trace: &EncoderTrace, d: &[f64]| match self.features {
            FeatureSource::Sentence => self.encoder.backward(trace, Some(d), None, &mut grads.encoder),
            FeatureSource::Hidden => self.encoder.backward(trace, None, Some(d), &mut grads.encoder),
        };
        match &tb {
            None => push(&ta, &d_features),
            Some(tb) => {
                let (du, dv) = pair_features_backward(self.rep(&ta), self.rep(tb), &d_features);
                push(&ta, &du);
                push(tb, &dv);
            }
        }
        Ok(loss)
    }

    /// Cross-entropy of one example and its gradient for every parameter,
    /// in [`Parameters`] order.
    pub fn loss_and_gradients(&self, a: &[u32], b: Option<&[u32]>, label: usize) -> Result<(f64, Vec<Tensor>)> {
        let mut grads = TaskGrads::zeros(self);
        let loss = self.accumulate(a, b, label, None, &mut grads)?;
        Ok((loss, grads.dense(self)))
    }

    /// Cross-entropy of one example.
    pub fn loss(&self, a: &[u32], b: Option<&[u32]>, label: usize) -> Result<f64> {
        Ok(cross_entropy_grad(&self.logits(a, b)?, label)?.0)
    }
}

impl Parameters for TaskModel {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_parameters();
        out.extend(self.head.named_parameters());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.parameters_mut();
        out.extend(self.head.parameters_mut());
        out
    }
}

pub fn single_forward(tokens: &[u32], model: &TaskModel) -> Result<Tensor> {
    Tensor::vector(model.logits(tokens, None)?)
}

pub fn pair_forward(tokens_a: &[u32], tokens_b: &[u32], model: &TaskModel) -> Result<Tensor> {
    Tensor::vector(model.logits(tokens_a, Some(tokens_b))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lr_grid: Vec<f64>,
    pub max_epochs: usize,
    /// Epochs without dev improvement before an arm stops; `None` trains
    /// for `max_epochs`.
    pub patience: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the logit MSE term when teacher logits are supplied.
    pub alpha: f64,
    pub head_hidden: Vec<usize>,
    pub features: FeatureSource,
    pub execution: Execution,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr_grid: vec![2e-4, 3e-4, 5e-4, 1e-3],
            max_epochs: 100,
            patience: Some(5),
            batch_size: 32,
            seed: 0,
            alpha: 1.0,
            head_hidden: vec![DEFAULT_HEAD_WIDTH],
            features: FeatureSource::Sentence,
            execution: Execution::Sequential,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Parameter("learning-rate grid must be non-empty and positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Parameter(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Parameter("batch size and epochs must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Parameter("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Dev score compared lexicographically: accuracy for single-sentence and
/// multi-class tasks, (F1, accuracy) for binary pair tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevScore {
    pub primary: f64,
    pub secondary: Option<f64>,
}

impl DevScore {
    fn better_than(&self, other: &DevScore) -> bool {
        match self.primary.total_cmp(&other.primary) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => self.secondary.unwrap_or(0.0) > other.secondary.unwrap_or(0.0),
        }
    }

    fn from_report(kind: TaskKind, report: &MetricReport) -> Self {
        match (kind, report.f1) {
            (TaskKind::Pair, Some(f1)) => DevScore {
                primary: f1,
                secondary: Some(report.accuracy),
            },
            _ => DevScore {
                primary: report.accuracy,
                secondary: None,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub lr: f64,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub lr: f64,
    pub best_epoch: usize,
    pub best_score: DevScore,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub rows: Vec<ReportRow>,
    pub arms: Vec<ArmSummary>,
    pub best_lr: f64,
    pub best_score: DevScore,
}

impl FinetuneReport {
    /// `lr,epoch,train_loss,dev_metric`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lr,epoch,train_loss,dev_metric\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.lr, r.epoch, r.train_loss, r.dev_metric).expect("writing to a String");
        }
        out
    }

    /// Dev metric per epoch of one arm.
    pub fn dev_history(&self, lr: f64) -> Vec<f64> {
        self.rows.iter().filter(|r| r.lr == lr).map(|r| r.dev_metric).collect()
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: TaskModel,
    pub report: FinetuneReport,
}

/// A tokenized example ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub a: Vec<u32>,
    pub b: Option<Vec<u32>>,
    pub label: Option<usize>,
    teacher: Option<Vec<f64>>,
}

/// Tokenizes examples, dropping (with a warning) those with an empty side.
/// Returns the kept examples and their positions in the input.
pub fn encode_examples(examples: &[LabeledExample], vocab: &Vocabulary) -> (Vec<Encoded>, Vec<usize>) {
    let mut out = Vec::with_capacity(examples.len());
    let mut kept = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let a = vocab.encode_text(&ex.text_a);
        let b = ex.text_b.as_deref().map(|t| vocab.encode_text(t));
        if a.is_empty() || b.as_ref().is_some_and(Vec::is_empty) {
            continue;
        }
        out.push(Encoded {
            a,
            b,
            label: ex.label,
            teacher: None,
        });
        kept.push(i);
    }
    if kept.len() < examples.len() {
        log::warn!("skipped {} example(s) with an empty sentence", examples.len() - kept.len());
    }
    (out, kept)
}

/// Key of an example in a teacher-logit file.
pub fn example_id(ex: &LabeledExample) -> String {
    match &ex.text_b {
        Some(b) => pair_id(&ex.text_a, b),
        None => sentence_id(&ex.text_a),
    }
}

/// Predicted class and its softmax probability for each example.
pub fn predict(model: &TaskModel, examples: &[Encoded], exec: Execution) -> Result<Vec<(usize, f64)>> {
    map_items(exec, examples, |e| {
        let probs = softmax(&model.logits(&e.a, e.b.as_deref())?);
        let (arg, &p) = probs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1).then(y.0.cmp(&x.0)))
            .expect("at least one class");
        Ok((arg, p))
    })
    .into_iter()
    .collect()
}

/// Metrics of `model` on labeled examples.
pub fn evaluate(model: &TaskModel, examples: &[Encoded], exec: Execution) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty"));
    }
    let golds = examples
        .iter()
        .map(|e| e.label.ok_or_else(|| Error::Input("evaluation example without a label".into())))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<usize> = predict(model, examples, exec)?.into_iter().map(|(p, _)| p).collect();
    MetricReport::compute(&preds, &golds, model.num_classes())
}

/// `id\tpred\tscore` rows; `id` is the example's position in its input file.
pub fn predictions_tsv(ids: &[usize], preds: &[(usize, f64)], labels: &LabelDict) -> String {
    let mut out = String::from("id\tpred\tscore\n");
    for (id, (p, s)) in ids.iter().zip(preds) {
        writeln!(out, "{id}\t{}\t{s}", labels.label(*p).unwrap_or("?")).expect("writing to a String");
    }
    out
}

fn batch_gradient(
    model: &TaskModel,
    data: &[Encoded],
    batch: &[usize],
    alpha: f64,
    exec: Execution,
) -> Result<(TaskGrads, f64)> {
    let parts = map_chunks(exec, batch, REDUCTION_CHUNK, |_, chunk| -> Result<(TaskGrads, f64)> {
        let mut g = TaskGrads::zeros(model);
        let mut loss = 0.0;
        for &i in chunk {
            let e = &data[i];
            let label = e.label.expect("training labels are checked up front");
            let teacher = e.teacher.as_deref().map(|t| (t, alpha));
            loss += model.accumulate(&e.a, e.b.as_deref(), label, teacher, &mut g)?;
        }
        Ok((g, loss))
    });
    let mut total = TaskGrads::zeros(model);
    let mut loss = 0.0;
    for part in parts {
        let (g, l) = part?;
        total.add_assign(&g);
        loss += l;
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((total, loss))
}

struct ArmResult {
    model: TaskModel,
    rows: Vec<ReportRow>,
    summary: ArmSummary,
}

fn train_arm(initial: &TaskModel, train: &[Encoded], dev: &[Encoded], lr: f64, cfg: &FinetuneConfig) -> Result<ArmResult> {
    let mut model = initial.clone();
    let mut adam = {
        let params: Vec<&Tensor> = model.parameters_mut().into_iter().map(|t| &*t).collect();
        AdamState::new(AdamConfig::with_lr(lr), &params)?
    };
    let mut rng = Rng::derive(cfg.seed, lr.to_bits());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rows = Vec::new();
    let mut best: Option<(DevScore, usize, TaskModel)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (grads, loss) = batch_gradient(&model, train, batch, cfg.alpha, cfg.execution)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at lr {lr}, epoch {epoch}, batch {b}")));
            }
            let dense = grads.dense(&model);
            let grefs: Vec<&Tensor> = dense.iter().collect();
            let mut params = model.parameters_mut();
            adam.step(&mut params, &grefs)
                .map_err(|e| Error::Numeric(format!("lr {lr}, epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += loss;
        }
        epochs_run = epoch;
        let score = DevScore::from_report(model.kind, &evaluate(&model, dev, cfg.execution)?);
        rows.push(ReportRow {
            lr,
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev_metric: score.primary,
        });
        if best.as_ref().is_none_or(|(s, _, _)| score.better_than(s)) {
            best = Some((score, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    let (best_score, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(ArmResult {
        model: best_model,
        rows,
        summary: ArmSummary {
            lr,
            best_epoch,
            best_score,
            epochs_run,
        },
    })
}

/// Fine-tunes a copy of `initial` for every learning rate in the grid with
/// early stopping on the dev score, and returns the best arm's best model.
/// Ties between arms go to the smaller learning rate.
///
/// With teacher logits and `alpha > 0` every training example must have a
/// logit record or the run fails before training. With `alpha == 0` the
/// logits are ignored entirely.
pub fn finetune(
    initial: &TaskModel,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
    teacher_logits: Option<&TeacherLogits>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let k = initial.num_classes();
    for ex in train.iter().chain(dev) {
        if ex.kind() != initial.kind {
            return Err(Error::Input("example kind does not match the task model".into()));
        }
        match ex.label {
            None => return Err(Error::Input("fine-tuning examples must be labeled".into())),
            Some(l) if l >= k => return Err(Error::Label { label: l, classes: k }),
            Some(_) => {}
        }
    }
    let (mut train_enc, kept) = encode_examples(train, vocab);
    let (dev_enc, _) = encode_examples(dev, vocab);
    if train_enc.is_empty() {
        return Err(Error::EmptyInput("no usable training examples"));
    }
    if dev_enc.is_empty() {
        return Err(Error::EmptyInput("no usable dev examples"));
    }
    if let Some(logits) = teacher_logits.filter(|_| cfg.alpha > 0.0) {
        let mut missing = Vec::new();
        let mut seen = HashSet::new();
        for (e, &i) in train_enc.iter_mut().zip(&kept) {
            let ex = &train[i];
            match logits.get(&example_id(ex)) {
                Some(t) if t.len() == k => e.teacher = Some(t.to_vec()),
                Some(t) => return Err(Error::dim("teacher logits", &[t.len()], &[k])),
                None => {
                    let label = match &ex.text_b {
                        Some(b) => format!("{}\t{}", ex.text_a, b),
                        None => ex.text_a.clone(),
                    };
                    if seen.insert(label.clone()) {
                        missing.push(label);
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Coverage { missing });
        }
    }

    let arms = map_items(cfg.execution, &cfg.lr_grid, |&lr| train_arm(initial, &train_enc, &dev_enc, lr, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut best_idx = 0;
    for (i, arm) in arms.iter().enumerate().skip(1) {
        let cur = &arms[best_idx].summary;
        let s = &arm.summary;
        let tie = s.best_score == cur.best_score;
        if s.best_score.better_than(&cur.best_score) || (tie && s.lr < cur.lr) {
            best_idx = i;
        }
    }
    let best_lr = arms[best_idx].summary.lr;
    let best_score = arms[best_idx].summary.best_score;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut model = None;
    for (i, arm) in arms.into_iter().enumerate() {
        rows.extend(arm.rows);
        summaries.push(arm.summary);
        if i == best_idx {
            model = Some(arm.model);
        }
    }
    Ok(FinetuneOutcome {
        model: model.expect("best arm exists"),
        report: FinetuneReport {
            rows,
            arms: summaries,
            best_lr,
            best_score,
        },
    })
}

/// Number of evenly spaced thresholds in [-1, 1] tried when choosing one.
pub const THRESHOLD_STEPS: usize = 101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub threshold: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub majority_baseline: f64,
    /// Dev accuracy at the chosen threshold, when it was chosen on dev.
    pub dev_accuracy: Option<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b && a.iter().any(|&x| x != 0.0) {
        // Identical vectors; avoid a rounded 0.9999999999999998.
        return 1.0;
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < MIN_NORM || nb < MIN_NORM {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn pair_cosines(pairs: &[LabeledExample], encoder: &StudentEncoder, vocab: &Vocabulary) -> Result<(Vec<f64>, Vec<usize>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("similarity evaluation needs pairs"));
    }
    let mut cos = Vec::with_capacity(pairs.len());
    let mut golds = Vec::with_capacity(pairs.len());
    for ex in pairs {
        let b = ex
            .text_b
            .as_deref()
            .ok_or_else(|| Error::Input("similarity evaluation needs sentence pairs".into()))?;
        let label = ex.label.ok_or_else(|| Error::Input("similarity pairs must be labeled".into()))?;
        if label > 1 {
            return Err(Error::Label { label, classes: 2 });
        }
        let sa = encoder.encode(&vocab.encode_text(&ex.text_a))?;
        let sb = encoder.encode(&vocab.encode_text(b))?;
        cos.push(cosine(sa.data(), sb.data()));
        golds.push(label);
    }
    Ok((cos, golds))
}

fn threshold_preds(cos: &[f64], t: f64) -> Vec<usize> {
    cos.iter().map(|&c| usize::from(c >= t)).collect()
}

/// Predicts "paraphrase" (label 1) when the cosine of the two frozen sentence
/// vectors is at least the threshold. Without a threshold, the one of
/// [`THRESHOLD_STEPS`] evenly spaced values in [-1, 1] with the best dev
/// accuracy is used; ties go to the smallest threshold.
pub fn untuned_similarity_eval(
    pairs: &[LabeledExample],
    dev: &[LabeledExample],
    encoder: &StudentEncoder,
    vocab: &Vocabulary,
    threshold: Option<f64>,
) -> Result<SimilarityReport> {
    let (cos, golds) = pair_cosines(pairs, encoder, vocab)?;
    let (threshold, dev_accuracy) = match threshold {
        Some(t) => (t, None),
        None => {
            let (dcos, dgolds) = pair_cosines(dev, encoder, vocab)?;
            let mut best = (f64::NAN, -1.0);
            for i in 0..THRESHOLD_STEPS {
                let half = (THRESHOLD_STEPS - 1) as f64 / 2.0;
                let t = (i as f64 - half) / half;
                let acc = crate::metrics::accuracy(&threshold_preds(&dcos, t), &dgolds)?;
                if acc > best.1 {
                    best = (t, acc);
                }
            }
            (best.0, Some(best.1))
        }
    };
    let preds = threshold_preds(&cos, threshold);
    let report = MetricReport::compute(&preds, &golds, 2)?;
    Ok(SimilarityReport {
        threshold,
        accuracy: report.accuracy,
        f1: report.f1.unwrap_or(0.0),
        majority_baseline: report.majority_baseline(),
        dev_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{EncoderConfig, Linear};

    fn encoder(seed: u64) -> StudentEncoder {
        let cfg = EncoderConfig {
            vocab_size: 12,
            embed_dim: 3,
            hidden_dim: 3,
            output_dim: 4,
        };
        StudentEncoder::new(cfg, &mut Rng::new(seed)).unwrap()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens((0..9).map(|i| format!("t{i}"))).unwrap()
    }

    #[test]
    fn pair_feature_examples() {
        let h = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let h2 = Tensor::vector(vec![3.0, 1.0]).unwrap();
        assert_eq!(pair_features(&h, &h2).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 1.0, 3.0, 2.0]);
        assert_eq!(pair_features(&h, &h).unwrap().data(), &[1.0, 2.0, 1.0, 2.0, 0.0, 0.0, 1.0, 4.0]);
        let z = Tensor::zeros(&[3]);
        assert!(pair_features(&z, &z).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(pair_features(&h, &z), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_head_outputs_bias() {
        let mut m = TaskModel::new(encoder(1), TaskKind::Single, FeatureSource::Sentence, &[5], 3, &mut Rng::new(2)).unwrap();
        for t in m.head_mut().parameters_mut() {
            t.data_mut().fill(0.0);
        }
        m.head_mut().output_layer_mut().bias = Tensor::vector(vec![0.5, -1.0, 2.0]).unwrap();
        for toks in [&[3u32, 4][..], &[7, 8, 9, 1]] {
            assert_eq!(single_forward(toks, &m).unwrap().data(), &[0.5, -1.0, 2.0]);
        }
        assert!(matches!(single_forward(&[], &m), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn swap_symmetric_head_gives_same_logits() {
        let enc = encoder(3);
        let m = 4;
        let mut rng = Rng::new(4);
        let out = Linear::xavier(4 * m, 2, &mut rng).unwrap();
        let mut w = out.weight.clone();
        for r in 0..2 {
            for c in 0..m {
                let v = w.row(r)[c];
                w.row_mut(r)[m + c] = v;
            }
        }
        let head = MlpHead::from_layers(vec![], Linear { weight: w, bias: out.bias }).unwrap();
        let model = TaskModel::from_parts(enc, head, TaskKind::Pair, FeatureSource::Sentence).unwrap();
        let ab = pair_forward(&[3, 4, 5], &[6, 7], &model).unwrap();
        let ba = pair_forward(&[6, 7], &[3, 4, 5], &model).unwrap();
        for (x, y) in ab.data().iter().zip(ba.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(pair_forward(&[3], &[], &model), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn identical_pair_has_zero_difference_block() {
        let enc = encoder(5);
        let s = enc.encode(&[3, 4]).unwrap();
        let f = pair_features(&s, &s).unwrap();
        assert!(f.data()[8..12].iter().all(|&v| v == 0.0));
    }

    fn toy_single(n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| {
                let label = i % 2;
                let words = if label == 1 { "t1 t2 t3" } else { "t4 t5 t6" };
                LabeledExample::single(format!("{words} t{}", i % 9), Some(label))
            })
            .collect()
    }

    fn quick_cfg() -> FinetuneConfig {
        FinetuneConfig {
            lr_grid: vec![1e-2],
            max_epochs: 8,
            patience: None,
            batch_size: 8,
            head_hidden: vec![8],
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn finetune_is_deterministic_and_learns() {
        let data = toy_single(32);
        let init = TaskModel::new(encoder(6), TaskKind::Single, FeatureSource::Sentence, &[8], 2, &mut Rng::new(7)).unwrap();
        let a = finetune(&init, &data, &data, &vocab(), &quick_cfg(), None).unwrap();
        let b = finetune(&init, &data, &data, &vocab(), &quick_cfg(), None).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.rows.len(), 8);
        assert!(a.report.best_score.primary > 0.9, "{:?}", a.report.best_score);
    }

    #[test]
    fn zero_alpha_ignores_teacher_logits() {
        let data = toy_single(16);
        let init = TaskModel::new(encoder(8), TaskKind::Single, FeatureSource::Hidden, &[8], 2, &mut Rng::new(9)).unwrap();
        let mut logits = TeacherLogits::default();
        for ex in &data {
            logits.insert(example_id(ex), vec![3.0, -3.0]);
        }
        let cfg = FinetuneConfig { alpha: 0.0, ..quick_cfg() };
        let plain = finetune(&init, &data, &data, &vocab(), &cfg, None).unwrap();
        let kd0 = finetune(&init, &data, &data, &vocab(), &cfg, Some(&logits)).unwrap();
        assert_eq!(plain.report, kd0.report);
        let kd = finetune(&init, &data, &data, &vocab(), &quick_cfg(), Some(&logits)).unwrap();
        assert_ne!(plain.report.rows[0].train_loss, kd.report.rows[0].train_loss);
        let partial = TeacherLogits::default();
        assert!(matches!(
            finetune(&init, &data, &data, &vocab(), &quick_cfg(), Some(&partial)),
            Err(Error::Coverage { .. })
        ));
    }

    #[test]
    fn grid_ties_prefer_smaller_lr_and_single_lr_degenerates() {
        let data = toy_single(16);
        let init = TaskModel::new(encoder(10), TaskKind::Single, FeatureSource::Sentence, &[8], 2, &mut Rng::new(1)).unwrap();
        let cfg = FinetuneConfig {
            lr_grid: vec![1e-2, 2e-2],
            ..quick_cfg()
        };
        let out = finetune(&init, &data, &data, &vocab(), &cfg, None).unwrap();
        assert_eq!(out.report.arms.len(), 2);
        let max = out.report.arms.iter().map(|a| a.best_score.primary).fold(f64::MIN, f64::max);
        assert_eq!(out.report.best_score.primary, max);
        if out.report.arms[0].best_score == out.report.arms[1].best_score {
            assert_eq!(out.report.best_lr, 1e-2);
        }
        let one = finetune(&init, &data, &data, &vocab(), &quick_cfg(), None).unwrap();
        assert_eq!(one.report.dev_history(1e-2), out.report.dev_history(1e-2));
    }

    #[test]
    fn checkpoint_inheritance_copies_encoder_and_seeds_head() {
        let enc = encoder(11);
        let v = Vocabulary::from_tokens((0..9).map(|i| format!("t{i}"))).unwrap();
        let ck = Checkpoint::distilled(&enc, &v, vec![]).unwrap();
        let a = TaskModel::from_checkpoint(&ck, TaskKind::Pair, FeatureSource::Sentence, &[6], 2, 5).unwrap();
        let b = TaskModel::from_checkpoint(&ck, TaskKind::Pair, FeatureSource::Sentence, &[6], 2, 5).unwrap();
        assert_eq!(a.encoder(), &ck.encoder().unwrap());
        assert_eq!(a.head(), b.head());
        assert_eq!(a.head().input_dim(), 16);
        let c = TaskModel::from_checkpoint(&ck, TaskKind::Pair, FeatureSource::Sentence, &[6], 2, 6).unwrap();
        assert_ne!(a.head(), c.head());
        let labels = LabelDict::from_observed(["0", "1"]).unwrap();
        let saved = a.to_checkpoint(Some(ck.digest()), &v, &labels, vec![]).unwrap();
        let back = TaskModel::from_finetuned(&saved).unwrap();
        assert_eq!(back.encoder(), a.encoder());
        let again = back.to_checkpoint(Some(ck.digest()), &v, &labels, vec![]).unwrap();
        assert_eq!(again.to_bytes(), saved.to_bytes());
    }

    #[test]
    fn similarity_threshold_edge_cases() {
        let enc = encoder(12);
        let pairs = vec![
            LabeledExample::pair("t1 t2", "t1 t2", Some(1)),
            LabeledExample::pair("t3", "t4 t5", Some(0)),
            LabeledExample::pair("t6 t7", "t8", Some(0)),
        ];
        let r = untuned_similarity_eval(&pairs, &[], &enc, &vocab(), Some(-1.0)).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
        let r = untuned_similarity_eval(&pairs[..1], &[], &enc, &vocab(), Some(1.0)).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(matches!(
            untuned_similarity_eval(&[], &[], &enc, &vocab(), Some(0.0)),
            Err(Error::EmptyInput(_))
        ));
        let chosen = untuned_similarity_eval(&pairs, &pairs, &enc, &vocab(), None).unwrap();
        assert!(chosen.dev_accuracy.unwrap() >= 2.0 / 3.0);
        assert!((-1.0..=1.0).contains(&chosen.threshold));
    }
}
