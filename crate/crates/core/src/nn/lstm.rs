//! LSTM cell and the bidirectional unroll with hand-derived backward passes.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{axpy, matvec, matvec_t_acc, outer_acc, sigmoid, uniform_init, Tensor};

/// Gate order used for every per-gate array in this module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Candidate];

    pub fn suffix(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Forget => "f",
            Gate::Output => "o",
            Gate::Candidate => "g",
        }
    }
}

pub const LSTM_INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS_INIT: f64 = 1.0;

/// Parameters of one LSTM direction. Each gate has an `h x (E + h)` weight
/// acting on `[x; h_prev]` and a bias of length `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    input_dim: usize,
    hidden_dim: usize,
    weights: [Tensor; 4],
    biases: [Tensor; 4],
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Tensor::zeros(&[hidden_dim, input_dim + hidden_dim]);
        let b = || Tensor::zeros(&[hidden_dim]);
        LstmParams {
            input_dim,
            hidden_dim,
            weights: [w(), w(), w(), w()],
            biases: [b(), b(), b(), b()],
        }
    }

    /// Weights uniform(-0.08, 0.08), biases zero except the forget gate at 1.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(input_dim, hidden_dim);
        for w in p.weights.iter_mut() {
            *w = uniform_init(rng, &[hidden_dim, input_dim + hidden_dim], -LSTM_INIT_RANGE, LSTM_INIT_RANGE)?;
        }
        p.biases[Gate::Forget as usize] = Tensor::filled(&[hidden_dim], FORGET_BIAS_INIT);
        Ok(p)
    }

    pub fn from_gates(weights: [Tensor; 4], biases: [Tensor; 4]) -> Result<Self> {
        let hidden_dim = biases[0].len();
        let cols = weights[0].cols();
        if cols <= hidden_dim {
            return Err(Error::dim("lstm weights", weights[0].shape(), &[hidden_dim]));
        }
        for (w, b) in weights.iter().zip(&biases) {
            if w.shape() != [hidden_dim, cols] {
                return Err(Error::dim("lstm gate weight", w.shape(), &[hidden_dim, cols]));
            }
            if b.shape() != [hidden_dim] {
                return Err(Error::dim("lstm gate bias", b.shape(), &[hidden_dim]));
            }
        }
        Ok(LstmParams {
            input_dim: cols - hidden_dim,
            hidden_dim,
            weights,
            biases,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn weight(&self, gate: Gate) -> &Tensor {
        &self.weights[gate as usize]
    }

    pub fn bias(&self, gate: Gate) -> &Tensor {
        &self.biases[gate as usize]
    }

    pub fn weight_mut(&mut self, gate: Gate) -> &mut Tensor {
        &mut self.weights[gate as usize]
    }

    pub fn bias_mut(&mut self, gate: Gate) -> &mut Tensor {
        &mut self.biases[gate as usize]
    }

    /// Weights then biases, each in gate order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(8);
        for g in Gate::ALL {
            out.push((format!("w_{}", g.suffix()), &self.weights[g as usize]));
        }
        for g in Gate::ALL {
            out.push((format!("b_{}", g.suffix()), &self.biases[g as usize]));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let (w, b) = (&mut self.weights, &mut self.biases);
        w.iter_mut().chain(b.iter_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        4 * (self.hidden_dim * (self.input_dim + self.hidden_dim) + self.hidden_dim)
    }

    pub(crate) fn add_assign(&mut self, other: &LstmParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(1.0, b.1.data(), a.data_mut());
        }
    }

    pub(crate) fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
}

/// Everything one cell step needs to run backward.
#[derive(Clone, Debug)]
pub(crate) struct CellCache {
    xh: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates in [`Gate`] order.
    gates: [Vec<f64>; 4],
    tanh_c: Vec<f64>,
    pub(crate) c: Vec<f64>,
    pub(crate) h: Vec<f64>,
}

pub(crate) fn cell_forward(p: &LstmParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> CellCache {
    let h = p.hidden_dim;
    let mut xh = Vec::with_capacity(x.len() + h);
    xh.extend_from_slice(x);
    xh.extend_from_slice(h_prev);
    let mut gates: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; h]);
    for g in Gate::ALL {
        let out = &mut gates[g as usize];
        matvec(p.weights[g as usize].data(), &xh, out);
        for (o, &b) in out.iter_mut().zip(p.biases[g as usize].data()) {
            let z = *o + b;
            *o = if g == Gate::Candidate { z.tanh() } else { sigmoid(z) };
        }
    }
    finish_cell(xh, c_prev.to_vec(), gates)
}

fn finish_cell(xh: Vec<f64>, c_prev: Vec<f64>, gates: [Vec<f64>; 4]) -> CellCache {
    let h = c_prev.len();
    let [i, f, o, g] = &gates;
    let mut c = vec![0.0; h];
    let mut tanh_c = vec![0.0; h];
    let mut h_out = vec![0.0; h];
    for j in 0..h {
        c[j] = f[j] * c_prev[j] + i[j] * g[j];
        tanh_c[j] = c[j].tanh();
        h_out[j] = o[j] * tanh_c[j];
    }
    CellCache {
        xh,
        c_prev,
        gates,
        tanh_c,
        c,
        h: h_out,
    }
}

/// Backpropagates one step. `d_xh` (length E + h) and the parameter
/// gradients are accumulated into; `dc_prev` is overwritten.
pub(crate) fn cell_backward(
    p: &LstmParams,
    cache: &CellCache,
    dh: &[f64],
    dc: &[f64],
    grads: &mut LstmParams,
    d_xh: &mut [f64],
    dc_prev: &mut [f64],
) {
    let h = p.hidden_dim;
    let [i, f, o, g] = &cache.gates;
    let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; h]);
    for j in 0..h {
        let tc = cache.tanh_c[j];
        let dct = dc[j] + dh[j] * o[j] * (1.0 - tc * tc);
        da[Gate::Output as usize][j] = dh[j] * tc * o[j] * (1.0 - o[j]);
        da[Gate::Input as usize][j] = dct * g[j] * i[j] * (1.0 - i[j]);
        da[Gate::Forget as usize][j] = dct * cache.c_prev[j] * f[j] * (1.0 - f[j]);
        da[Gate::Candidate as usize][j] = dct * i[j] * (1.0 - g[j] * g[j]);
        dc_prev[j] = dct * f[j];
    }
    for gate in Gate::ALL {
        let k = gate as usize;
        outer_acc(grads.weights[k].data_mut(), &da[k], &cache.xh);
        axpy(1.0, &da[k], grads.biases[k].data_mut());
        matvec_t_acc(p.weights[k].data(), &da[k], d_xh);
    }
}

fn check_cell_shapes(p: &LstmParams, x: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<()> {
    if x.shape() != [p.input_dim] {
        return Err(Error::dim("lstm_cell x", x.shape(), &[p.input_dim]));
    }
    for t in [h_prev, c_prev] {
        if t.shape() != [p.hidden_dim] {
            return Err(Error::dim("lstm_cell state", t.shape(), &[p.hidden_dim]));
        }
    }
    Ok(())
}

/// One LSTM step: returns `(h_t, c_t)`.
pub fn lstm_cell_forward(x: &Tensor, h_prev: &Tensor, c_prev: &Tensor, p: &LstmParams) -> Result<(Tensor, Tensor)> {
    check_cell_shapes(p, x, h_prev, c_prev)?;
    let cache = cell_forward(p, x.data(), h_prev.data(), c_prev.data());
    Ok((Tensor::vector(cache.h)?, Tensor::vector(cache.c)?))
}

#[derive(Clone, Debug)]
pub struct CellGradients {
    pub params: LstmParams,
    pub x: Tensor,
    pub h_prev: Tensor,
    pub c_prev: Tensor,
}

/// Gradients of `dh . h_t + dc . c_t` for one step.
pub fn lstm_cell_backward(
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    p: &LstmParams,
    dh: &Tensor,
    dc: &Tensor,
) -> Result<CellGradients> {
    check_cell_shapes(p, x, dh, dc)?;
    check_cell_shapes(p, x, h_prev, c_prev)?;
    let cache = cell_forward(p, x.data(), h_prev.data(), c_prev.data());
    let mut grads = LstmParams::zeros(p.input_dim, p.hidden_dim);
    let mut d_xh = vec![0.0; p.input_dim + p.hidden_dim];
    let mut dc_prev = vec![0.0; p.hidden_dim];
    cell_backward(p, &cache, dh.data(), dc.data(), &mut grads, &mut d_xh, &mut dc_prev);
    let d_h = d_xh.split_off(p.input_dim);
    Ok(CellGradients {
        params: grads,
        x: Tensor::vector(d_xh)?,
        h_prev: Tensor::vector(d_h)?,
        c_prev: Tensor::vector(dc_prev)?,
    })
}

// ---------------------------------------------------------------------------
// Bidirectional unroll.

#[derive(Clone, Debug)]
pub(crate) struct BiLstmTrace {
    forward: Vec<CellCache>,
    /// In processing order: the last token first.
    backward: Vec<CellCache>,
}

fn run_direction<'a>(p: &LstmParams, inputs: impl Iterator<Item = &'a [f64]>) -> Vec<CellCache> {
    let h = p.hidden_dim;
    let mut caches: Vec<CellCache> = Vec::new();
    let zeros = vec![0.0; h];
    for x in inputs {
        let cache = match caches.last() {
            Some(prev) => cell_forward(p, x, &prev.h, &prev.c),
            None => cell_forward(p, x, &zeros, &zeros),
        };
        caches.push(cache);
    }
    caches
}

/// `H = [h_fwd after the last token; h_bwd after the first token]`.
pub(crate) fn bilstm_forward(fwd: &LstmParams, bwd: &LstmParams, inputs: &[&[f64]]) -> (Vec<f64>, BiLstmTrace) {
    let forward = run_direction(fwd, inputs.iter().copied());
    let backward = run_direction(bwd, inputs.iter().rev().copied());
    let mut hidden = Vec::with_capacity(fwd.hidden_dim + bwd.hidden_dim);
    hidden.extend_from_slice(&forward.last().expect("non-empty sequence").h);
    hidden.extend_from_slice(&backward.last().expect("non-empty sequence").h);
    (hidden, BiLstmTrace { forward, backward })
}

fn unroll_backward(
    p: &LstmParams,
    caches: &[CellCache],
    d_final: &[f64],
    grads: &mut LstmParams,
    mut d_input: impl FnMut(usize, &[f64]),
) {
    let (e, h) = (p.input_dim, p.hidden_dim);
    let mut dh = d_final.to_vec();
    let mut dc = vec![0.0; h];
    let mut dc_prev = vec![0.0; h];
    for (step, cache) in caches.iter().enumerate().rev() {
        let mut d_xh = vec![0.0; e + h];
        cell_backward(p, cache, &dh, &dc, grads, &mut d_xh, &mut dc_prev);
        d_input(step, &d_xh[..e]);
        dh.copy_from_slice(&d_xh[e..]);
        std::mem::swap(&mut dc, &mut dc_prev);
    }
}

/// Backpropagates `d_hidden` (length 2h) through both directions. Input
/// gradients are accumulated into `d_inputs[t]` for sequence position `t`.
pub(crate) fn bilstm_backward(
    fwd: &LstmParams,
    bwd: &LstmParams,
    trace: &BiLstmTrace,
    d_hidden: &[f64],
    g_fwd: &mut LstmParams,
    g_bwd: &mut LstmParams,
    d_inputs: &mut [Vec<f64>],
) {
    let n = trace.forward.len();
    let (df, db) = d_hidden.split_at(fwd.hidden_dim);
    unroll_backward(fwd, &trace.forward, df, g_fwd, |t, dx| axpy(1.0, dx, &mut d_inputs[t]));
    unroll_backward(bwd, &trace.backward, db, g_bwd, |s, dx| axpy(1.0, dx, &mut d_inputs[n - 1 - s]));
}

fn check_bilstm(embedded: &[Tensor], fwd: &LstmParams, bwd: &LstmParams) -> Result<()> {
    if embedded.is_empty() {
        return Err(Error::EmptyInput("bilstm_encode needs at least one token"));
    }
    if fwd.input_dim != bwd.input_dim || fwd.hidden_dim != bwd.hidden_dim {
        return Err(Error::dim(
            "bilstm directions",
            &[fwd.input_dim, fwd.hidden_dim],
            &[bwd.input_dim, bwd.hidden_dim],
        ));
    }
    if let Some(bad) = embedded.iter().find(|t| t.shape() != [fwd.input_dim]) {
        return Err(Error::dim("bilstm input", bad.shape(), &[fwd.input_dim]));
    }
    Ok(())
}

/// Encodes a sequence of embedded tokens into the fixed-size vector `H`.
pub fn bilstm_encode(embedded: &[Tensor], fwd: &LstmParams, bwd: &LstmParams) -> Result<Tensor> {
    check_bilstm(embedded, fwd, bwd)?;
    let inputs: Vec<&[f64]> = embedded.iter().map(Tensor::data).collect();
    Tensor::vector(bilstm_forward(fwd, bwd, &inputs).0)
}

#[derive(Clone, Debug)]
pub struct BiLstmGradients {
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub inputs: Vec<Tensor>,
}

/// Gradients of `d_hidden . H` with respect to both directions and the inputs.
pub fn bilstm_encode_backward(
    embedded: &[Tensor],
    fwd: &LstmParams,
    bwd: &LstmParams,
    d_hidden: &Tensor,
) -> Result<BiLstmGradients> {
    check_bilstm(embedded, fwd, bwd)?;
    if d_hidden.len() != 2 * fwd.hidden_dim {
        return Err(Error::dim("bilstm d_hidden", d_hidden.shape(), &[2 * fwd.hidden_dim]));
    }
    let inputs: Vec<&[f64]> = embedded.iter().map(Tensor::data).collect();
    let (_, trace) = bilstm_forward(fwd, bwd, &inputs);
    let mut g_fwd = LstmParams::zeros(fwd.input_dim, fwd.hidden_dim);
    let mut g_bwd = LstmParams::zeros(bwd.input_dim, bwd.hidden_dim);
    let mut d_inputs = vec![vec![0.0; fwd.input_dim]; embedded.len()];
    bilstm_backward(fwd, bwd, &trace, d_hidden.data(), &mut g_fwd, &mut g_bwd, &mut d_inputs);
    Ok(BiLstmGradients {
        forward: g_fwd,
        backward: g_bwd,
        inputs: d_inputs.into_iter().map(Tensor::vector).collect::<Result<_>>()?,
    })
}

/// Final hidden states of one direction for a batch of sequences, computed
/// step by step over the rows still active at that step. Matches
/// [`run_direction`] bit for bit on every row.
pub(crate) fn run_direction_batch(p: &LstmParams, rows: &[Vec<&[f64]>], reverse: bool) -> Vec<Vec<f64>> {
    let (e, h) = (p.input_dim, p.hidden_dim);
    let k = e + h;
    let max_len = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut hs = vec![vec![0.0; h]; rows.len()];
    let mut cs = vec![vec![0.0; h]; rows.len()];
    let mut xh = Vec::new();
    let mut pre = Vec::new();
    for step in 0..max_len {
        let active: Vec<usize> = (0..rows.len()).filter(|&r| rows[r].len() > step).collect();
        xh.clear();
        for &r in &active {
            let len = rows[r].len();
            let pos = if reverse { len - 1 - step } else { step };
            xh.extend_from_slice(rows[r][pos]);
            xh.extend_from_slice(&hs[r]);
        }
        let n = active.len();
        let mut gates: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n * h]);
        for g in Gate::ALL {
            pre.resize(n * h, 0.0);
            crate::tensor::matmul_rows_nt(&xh, k, p.weights[g as usize].data(), h, &mut pre);
            let bias = p.biases[g as usize].data();
            for (idx, (out, &z)) in gates[g as usize].iter_mut().zip(&pre).enumerate() {
                let z = z + bias[idx % h];
                *out = if g == Gate::Candidate { z.tanh() } else { sigmoid(z) };
            }
        }
        for (slot, &r) in active.iter().enumerate() {
            let s = slot * h..(slot + 1) * h;
            let (i, f, o, g) = (&gates[0][s.clone()], &gates[1][s.clone()], &gates[2][s.clone()], &gates[3][s]);
            for j in 0..h {
                let c = f[j] * cs[r][j] + i[j] * g[j];
                cs[r][j] = c;
                hs[r][j] = o[j] * c.tanh();
            }
        }
    }
    hs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecs(rng: &mut Rng, n: usize, dim: usize) -> Vec<Tensor> {
        (0..n).map(|_| uniform_init(rng, &[dim], -1.0, 1.0).unwrap()).collect()
    }

    #[test]
    fn zero_params_zero_state_gives_zero_output() {
        let p = LstmParams::zeros(3, 2);
        let x = Tensor::vector(vec![0.3, -1.0, 2.0]).unwrap();
        let z = Tensor::zeros(&[2]);
        let (h, c) = lstm_cell_forward(&x, &z, &z, &p).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_params_carry_half_the_cell() {
        let p = LstmParams::zeros(2, 1);
        let x = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let h0 = Tensor::zeros(&[1]);
        let c0 = Tensor::vector(vec![2.0]).unwrap();
        let (h, c) = lstm_cell_forward(&x, &h0, &c0, &p).unwrap();
        assert!((c.data()[0] - 1.0).abs() < 1e-15);
        let expected = 0.5 * 1.0f64.tanh();
        assert!((h.data()[0] - expected).abs() < 1e-15);
        assert!((h.data()[0] - 0.3808).abs() < 1e-4);
    }

    #[test]
    fn init_sets_forget_bias() {
        let p = LstmParams::init(4, 3, &mut Rng::new(1)).unwrap();
        assert!(p.bias(Gate::Forget).data().iter().all(|&b| b == 1.0));
        assert!(p.bias(Gate::Input).data().iter().all(|&b| b == 0.0));
        assert!(p
            .weight(Gate::Candidate)
            .data()
            .iter()
            .all(|w| w.abs() < LSTM_INIT_RANGE));
        assert_eq!(p.param_count(), 4 * (3 * 7 + 3));
    }

    #[test]
    fn cell_rejects_bad_shapes() {
        let p = LstmParams::zeros(3, 2);
        let x = Tensor::zeros(&[2]);
        let z = Tensor::zeros(&[2]);
        assert!(matches!(lstm_cell_forward(&x, &z, &z, &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn length_one_sequence_is_well_defined() {
        let mut rng = Rng::new(3);
        let f = LstmParams::init(2, 3, &mut rng).unwrap();
        let b = LstmParams::init(2, 3, &mut rng).unwrap();
        let x = vecs(&mut rng, 1, 2);
        let h = bilstm_encode(&x, &f, &b).unwrap();
        assert_eq!(h.shape(), &[6]);
        // Both directions take a single step from the zero state.
        let z = Tensor::zeros(&[3]);
        let (hf, _) = lstm_cell_forward(&x[0], &z, &z, &f).unwrap();
        let (hb, _) = lstm_cell_forward(&x[0], &z, &z, &b).unwrap();
        assert_eq!(&h.data()[..3], hf.data());
        assert_eq!(&h.data()[3..], hb.data());
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let p = LstmParams::zeros(2, 2);
        assert!(matches!(bilstm_encode(&[], &p, &p), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn batched_directions_match_single_rows() {
        let mut rng = Rng::new(8);
        let p = LstmParams::init(3, 4, &mut rng).unwrap();
        let seqs: Vec<Vec<Tensor>> = [1, 4, 2, 5].iter().map(|&n| vecs(&mut rng, n, 3)).collect();
        let rows: Vec<Vec<&[f64]>> = seqs.iter().map(|s| s.iter().map(Tensor::data).collect()).collect();
        for reverse in [false, true] {
            let batched = run_direction_batch(&p, &rows, reverse);
            for (row, out) in rows.iter().zip(&batched) {
                let single = if reverse {
                    run_direction(&p, row.iter().rev().copied())
                } else {
                    run_direction(&p, row.iter().copied())
                };
                assert_eq!(&single.last().unwrap().h, out);
            }
        }
    }
}
