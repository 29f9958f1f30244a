//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check builds a small random problem, compares the analytic gradient
//! of a scalar objective with `(f(x + eps) - f(x - eps)) / (2 eps)` for every
//! coordinate and reports the largest relative error
//! `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::Result;
use crate::finetune::{pair_features_backward, pair_features_raw, FeatureSource, TaskModel};
use crate::nn::{
    bilstm_encode, bilstm_encode_backward, cosine_loss, cosine_loss_grad, cross_entropy_grad, lstm_cell_backward,
    lstm_cell_forward, mse_grad, EncoderConfig, EncoderGrads, LstmParams, MlpHead, Parameters, StudentEncoder,
};
use crate::rng::Rng;
use crate::tensor::{dot, uniform_init, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor so near-zero gradients are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// A scalar objective over some tensors with a hand-derived gradient.
trait Problem: Parameters {
    fn objective(&self) -> Result<f64>;
    /// Gradients in [`Parameters::parameters_mut`] order.
    fn gradient(&self) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: String,
    pub seeds: usize,
    pub coordinates: usize,
    pub max_relative_error: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= FD_TOLERANCE
    }
}

fn check_problem<P: Problem>(p: &mut P) -> Result<(usize, f64)> {
    let analytic = p.gradient()?;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = {
                let mut ts = p.parameters_mut();
                let v = ts[t].data()[i];
                ts[t].data_mut()[i] = v + FD_STEP;
                v
            };
            let plus = p.objective()?;
            p.parameters_mut()[t].data_mut()[i] = orig - FD_STEP;
            let minus = p.objective()?;
            p.parameters_mut()[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad.data()[i], numeric));
            count += 1;
        }
    }
    Ok((count, worst))
}

fn rand_vec(rng: &mut Rng, n: usize, scale: f64) -> Tensor {
    uniform_init(rng, &[n], -scale, scale).expect("valid range")
}

// ---------------------------------------------------------------------------

struct CellProblem {
    params: LstmParams,
    x: Tensor,
    h: Tensor,
    c: Tensor,
    rh: Tensor,
    rc: Tensor,
}

impl CellProblem {
    fn new(rng: &mut Rng) -> Result<Self> {
        let (e, h) = (2 + rng.below(4), 1 + rng.below(5));
        let mut params = LstmParams::init(e, h, rng)?;
        for t in params.tensors_mut() {
            *t = uniform_init(rng, t.shape(), -0.8, 0.8)?;
        }
        Ok(CellProblem {
            params,
            x: rand_vec(rng, e, 1.0),
            h: rand_vec(rng, h, 1.0),
            c: rand_vec(rng, h, 1.0),
            rh: rand_vec(rng, h, 1.0),
            rc: rand_vec(rng, h, 1.0),
        })
    }
}

impl Parameters for CellProblem {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.params.tensors();
        out.extend([("x".into(), &self.x), ("h_prev".into(), &self.h), ("c_prev".into(), &self.c)]);
        out
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.params.tensors_mut();
        out.extend([&mut self.x, &mut self.h, &mut self.c]);
        out
    }
}

impl Problem for CellProblem {
    fn objective(&self) -> Result<f64> {
        let (h, c) = lstm_cell_forward(&self.x, &self.h, &self.c, &self.params)?;
        Ok(dot(h.data(), self.rh.data()) + dot(c.data(), self.rc.data()))
    }
    fn gradient(&self) -> Result<Vec<Tensor>> {
        let g = lstm_cell_backward(&self.x, &self.h, &self.c, &self.params, &self.rh, &self.rc)?;
        let mut out: Vec<Tensor> = g.params.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        out.extend([g.x, g.h_prev, g.c_prev]);
        Ok(out)
    }
}

struct BiLstmProblem {
    fwd: LstmParams,
    bwd: LstmParams,
    inputs: Vec<Tensor>,
    r: Tensor,
}

impl BiLstmProblem {
    fn new(rng: &mut Rng) -> Result<Self> {
        let (e, h, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(5));
        let mut fwd = LstmParams::init(e, h, rng)?;
        let mut bwd = LstmParams::init(e, h, rng)?;
        for t in fwd.tensors_mut().into_iter().chain(bwd.tensors_mut()) {
            *t = uniform_init(rng, t.shape(), -0.6, 0.6)?;
        }
        Ok(BiLstmProblem {
            fwd,
            bwd,
            inputs: (0..n).map(|_| rand_vec(rng, e, 1.0)).collect(),
            r: rand_vec(rng, 2 * h, 1.0),
        })
    }
}

impl Parameters for BiLstmProblem {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.fwd.tensors();
        out.extend(self.bwd.tensors());
        out.extend(self.inputs.iter().map(|t| ("x".to_string(), t)));
        out
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.fwd.tensors_mut();
        out.extend(self.bwd.tensors_mut());
        out.extend(self.inputs.iter_mut());
        out
    }
}

impl Problem for BiLstmProblem {
    fn objective(&self) -> Result<f64> {
        Ok(dot(bilstm_encode(&self.inputs, &self.fwd, &self.bwd)?.data(), self.r.data()))
    }
    fn gradient(&self) -> Result<Vec<Tensor>> {
        let g = bilstm_encode_backward(&self.inputs, &self.fwd, &self.bwd, &self.r)?;
        let mut out: Vec<Tensor> = g.forward.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        out.extend(g.backward.tensors().into_iter().map(|(_, t)| t.clone()));
        out.extend(g.inputs);
        Ok(out)
    }
}

fn small_encoder(rng: &mut Rng) -> Result<StudentEncoder> {
    let cfg = EncoderConfig {
        vocab_size: 3 + 1 + rng.below(5),
        embed_dim: 1 + rng.below(4),
        hidden_dim: 1 + rng.below(4),
        output_dim: 1 + rng.below(5),
    };
    let mut enc = StudentEncoder::new(cfg, rng)?;
    for t in enc.parameters_mut() {
        *t = uniform_init(rng, t.shape(), -0.7, 0.7)?;
    }
    Ok(enc)
}

fn random_tokens(rng: &mut Rng, vocab: usize) -> Vec<u32> {
    (0..1 + rng.below(5)).map(|_| rng.below(vocab) as u32).collect()
}

struct EncoderProblem {
    enc: StudentEncoder,
    tokens: Vec<u32>,
    r: Vec<f64>,
}

impl EncoderProblem {
    fn new(rng: &mut Rng) -> Result<Self> {
        let enc = small_encoder(rng)?;
        let cfg = enc.config();
        Ok(EncoderProblem {
            tokens: random_tokens(rng, cfg.vocab_size),
            r: rand_vec(rng, cfg.output_dim, 1.0).into_data(),
            enc,
        })
    }
}

impl Parameters for EncoderProblem {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.enc.named_parameters()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.enc.parameters_mut()
    }
}

impl Problem for EncoderProblem {
    fn objective(&self) -> Result<f64> {
        Ok(dot(self.enc.encode(&self.tokens)?.data(), &self.r))
    }
    fn gradient(&self) -> Result<Vec<Tensor>> {
        let trace = self.enc.forward_trace(&self.tokens)?;
        let mut g = EncoderGrads::zeros(&self.enc.config());
        self.enc.backward(&trace, Some(&self.r), None, &mut g);
        Ok(g.dense(&self.enc.config(), true))
    }
}

struct MlpProblem {
    head: MlpHead,
    x: Tensor,
    r: Vec<f64>,
}

impl MlpProblem {
    fn new(rng: &mut Rng) -> Result<Self> {
        let input = 1 + rng.below(6);
        let hidden: Vec<usize> = (0..rng.below(3)).map(|_| 1 + rng.below(6)).collect();
        let classes = 1 + rng.below(4);
        let mut head = MlpHead::new(input, &hidden, classes, rng)?;
        for t in head.parameters_mut() {
            *t = uniform_init(rng, t.shape(), -1.0, 1.0)?;
        }
        Ok(MlpProblem {
            head,
            x: rand_vec(rng, input, 1.0),
            r: rand_vec(rng, classes, 1.0).into_data(),
        })
    }
}

impl Parameters for MlpProblem {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.head.named_parameters();
        out.push(("x".into(), &self.x));
        out
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.head.parameters_mut();
        out.push(&mut self.x);
        out
    }
}

impl Problem for MlpProblem {
    fn objective(&self) -> Result<f64> {
        Ok(dot(self.head.forward(&self.x)?.data(), &self.r))
    }
    fn gradient(&self) -> Result<Vec<Tensor>> {
        let trace = self.head.forward_trace(self.x.data())?;
        let mut g = self.head.zeros_like();
        let dx = self.head.backward(&trace, &self.r, &mut g);
        let mut out: Vec<Tensor> = g.named_parameters().into_iter().map(|(_, t)| t.clone()).collect();
        out.push(Tensor::vector(dx)?);
        Ok(out)
    }
}

/// A scalar objective of a flat vector and its gradient.
type VectorFn = fn(&[f64], &VectorCtx) -> Result<(f64, Vec<f64>)>;

/// One free vector `v` and a fixed scalar function of it.
struct VectorProblem {
    v: Tensor,
    f: VectorFn,
    ctx: VectorCtx,
}

struct VectorCtx {
    other: Vec<f64>,
    label: usize,
}

impl Parameters for VectorProblem {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        vec![("v".into(), &self.v)]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.v]
    }
}

impl Problem for VectorProblem {
    fn objective(&self) -> Result<f64> {
        Ok((self.f)(self.v.data(), &self.ctx)?.0)
    }
    fn gradient(&self) -> Result<Vec<Tensor>> {
        Ok(vec![Tensor::vector((self.f)(self.v.data(), &self.ctx)?.1)?])
    }
}

fn vector_problem(rng: &mut Rng, f: VectorFn) -> VectorProblem {
    let n = 1 + rng.below(8);
    let v = rand_vec(rng, n, 2.0);
    let ctx = VectorCtx {
        other: rand_vec(rng, n, 2.0).into_data(),
        label: rng.below(n),
    };
    VectorProblem { v, f, ctx }
}

fn cosine_objective(s: &[f64], c: &VectorCtx) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = cosine_loss_grad(&c.other, s)?;
    debug_assert_eq!(loss, cosine_loss(&c.other, s)?);
    Ok((loss, grad))
}

fn ce_objective(z: &[f64], c: &VectorCtx) -> Result<(f64, Vec<f64>)> {
    cross_entropy_grad(z, c.label)
}

fn mse_objective(z: &[f64], c: &VectorCtx) -> Result<(f64, Vec<f64>)> {
    mse_grad(z, &c.other)
}

/// `r . pair_features(u, v)` as a function of `u` (with `v` fixed) and vice versa.
struct PairFeatureProblem {
    u: Tensor,
    v: Tensor,
    r: Vec<f64>,
}

impl Parameters for PairFeatureProblem {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        vec![("u".into(), &self.u), ("v".into(), &self.v)]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.u, &mut self.v]
    }
}

impl Problem for PairFeatureProblem {
    fn objective(&self) -> Result<f64> {
        Ok(dot(&pair_features_raw(self.u.data(), self.v.data()), &self.r))
    }
    fn gradient(&self) -> Result<Vec<Tensor>> {
        let (du, dv) = pair_features_backward(self.u.data(), self.v.data(), &self.r);
        Ok(vec![Tensor::vector(du)?, Tensor::vector(dv)?])
    }
}

struct TaskProblem {
    model: TaskModel,
    a: Vec<u32>,
    b: Option<Vec<u32>>,
    label: usize,
}

impl TaskProblem {
    fn new(rng: &mut Rng, kind: TaskKind, features: FeatureSource) -> Result<Self> {
        let enc = small_encoder(rng)?;
        let v = enc.config().vocab_size;
        let classes = 2 + rng.below(2);
        let hidden = [1 + rng.below(6)];
        let mut model = TaskModel::new(enc, kind, features, &hidden, classes, rng)?;
        for t in model.head_mut().parameters_mut() {
            *t = uniform_init(rng, t.shape(), -1.0, 1.0)?;
        }
        Ok(TaskProblem {
            a: random_tokens(rng, v),
            b: (kind == TaskKind::Pair).then(|| random_tokens(rng, v)),
            label: rng.below(classes),
            model,
        })
    }
}

impl Parameters for TaskProblem {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.model.named_parameters()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.model.parameters_mut()
    }
}

impl Problem for TaskProblem {
    fn objective(&self) -> Result<f64> {
        self.model.loss(&self.a, self.b.as_deref(), self.label)
    }
    fn gradient(&self) -> Result<Vec<Tensor>> {
        Ok(self.model.loss_and_gradients(&self.a, self.b.as_deref(), self.label)?.1)
    }
}

fn run<P: Problem>(name: &str, seeds: &[u64], build: impl Fn(&mut Rng) -> Result<P>) -> Result<LayerCheck> {
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for &seed in seeds {
        let mut p = build(&mut Rng::new(seed))?;
        let (n, err) = check_problem(&mut p)?;
        coords += n;
        worst = worst.max(err);
    }
    Ok(LayerCheck {
        layer: name.to_string(),
        seeds: seeds.len(),
        coordinates: coords,
        max_relative_error: worst,
    })
}

/// Layer names checked by [`gradient_suite`], in report order.
pub const LAYERS: [&str; 11] = [
    "lstm_cell",
    "bilstm",
    "encoder",
    "mlp_head",
    "cosine_loss",
    "cross_entropy",
    "logit_mse",
    "pair_features",
    "single_task",
    "pair_task",
    "pair_task_hidden",
];

/// Runs every check over `seeds`.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<LayerCheck>> {
    Ok(vec![
        run(LAYERS[0], seeds, CellProblem::new)?,
        run(LAYERS[1], seeds, BiLstmProblem::new)?,
        run(LAYERS[2], seeds, EncoderProblem::new)?,
        run(LAYERS[3], seeds, MlpProblem::new)?,
        run(LAYERS[4], seeds, |r| Ok(vector_problem(r, cosine_objective)))?,
        run(LAYERS[5], seeds, |r| Ok(vector_problem(r, ce_objective)))?,
        run(LAYERS[6], seeds, |r| Ok(vector_problem(r, mse_objective)))?,
        run(LAYERS[7], seeds, |r| {
            let m = 1 + r.below(6);
            Ok(PairFeatureProblem {
                u: rand_vec(r, m, 1.0),
                v: rand_vec(r, m, 1.0),
                r: rand_vec(r, 4 * m, 1.0).into_data(),
            })
        })?,
        run(LAYERS[8], seeds, |r| TaskProblem::new(r, TaskKind::Single, FeatureSource::Sentence))?,
        run(LAYERS[9], seeds, |r| TaskProblem::new(r, TaskKind::Pair, FeatureSource::Sentence))?,
        run(LAYERS[10], seeds, |r| TaskProblem::new(r, TaskKind::Pair, FeatureSource::Hidden))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn suite_passes_on_one_seed() {
        for check in gradient_suite(&[1]).unwrap() {
            assert!(check.passed(), "{check:?}");
            assert!(check.coordinates > 0);
        }
    }
}
