//! ReLU multilayer perceptron used as the task-specific classifier.

use super::Parameters;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{axpy, matvec, matvec_t_acc, outer_acc, uniform_init, Tensor};

/// Hidden width used by the task heads unless configured otherwise.
pub const DEFAULT_HEAD_WIDTH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out x in`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights with zero bias.
    pub fn xavier(input: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Ok(Linear {
            weight: uniform_init(rng, &[output, input], -limit, limit)?,
            bias: Tensor::zeros(&[output]),
        })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        matvec(self.weight.data(), x, &mut out);
        for (o, &b) in out.iter_mut().zip(self.bias.data()) {
            *o += b;
        }
        out
    }
}

/// Linear + ReLU for every hidden layer, then a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    hidden: Vec<Linear>,
    output: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct MlpTrace {
    /// Input to each layer, hidden layers first, then the output layer.
    inputs: Vec<Vec<f64>>,
    pub(crate) logits: Vec<f64>,
}

impl MlpHead {
    pub fn new(input_dim: usize, hidden_dims: &[usize], num_classes: usize, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || hidden_dims.contains(&0) {
            return Err(Error::Parameter(format!(
                "invalid head dims: input {input_dim}, hidden {hidden_dims:?}, classes {num_classes}"
            )));
        }
        let mut hidden = Vec::with_capacity(hidden_dims.len());
        let mut prev = input_dim;
        for &w in hidden_dims {
            hidden.push(Linear::xavier(prev, w, rng)?);
            prev = w;
        }
        let output = Linear::xavier(prev, num_classes, rng)?;
        Ok(MlpHead { hidden, output })
    }

    pub fn from_layers(hidden: Vec<Linear>, output: Linear) -> Result<Self> {
        let mut prev = None;
        for layer in hidden.iter().chain(std::iter::once(&output)) {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::dim("mlp bias", layer.bias.shape(), &[layer.output_dim()]));
            }
            if let Some(p) = prev {
                if layer.input_dim() != p {
                    return Err(Error::dim("mlp layer", layer.weight.shape(), &[layer.output_dim(), p]));
                }
            }
            prev = Some(layer.output_dim());
        }
        Ok(MlpHead { hidden, output })
    }

    pub fn zeros_like(&self) -> Self {
        MlpHead {
            hidden: self
                .hidden
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            output: Linear::zeros(self.output.input_dim(), self.output.output_dim()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.output).input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.output.output_dim()
    }

    pub fn hidden_layers(&self) -> &[Linear] {
        &self.hidden
    }

    pub fn hidden_layers_mut(&mut self) -> &mut [Linear] {
        &mut self.hidden
    }

    pub fn output_layer(&self) -> &Linear {
        &self.output
    }

    pub fn output_layer_mut(&mut self) -> &mut Linear {
        &mut self.output
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden.iter().map(Linear::output_dim).collect()
    }

    pub(crate) fn forward_trace(&self, x: &[f64]) -> Result<MlpTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("mlp_forward", &[x.len()], &[self.input_dim()]));
        }
        let mut inputs = Vec::with_capacity(self.hidden.len() + 1);
        let mut cur = x.to_vec();
        for layer in &self.hidden {
            let mut next = layer.apply(&cur);
            next.iter_mut().for_each(|v| *v = v.max(0.0));
            inputs.push(cur);
            cur = next;
        }
        let logits = self.output.apply(&cur);
        inputs.push(cur);
        Ok(MlpTrace { inputs, logits })
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub(crate) fn backward(&self, trace: &MlpTrace, d_logits: &[f64], grads: &mut MlpHead) -> Vec<f64> {
        let last = trace.inputs.len() - 1;
        outer_acc(grads.output.weight.data_mut(), d_logits, &trace.inputs[last]);
        axpy(1.0, d_logits, grads.output.bias.data_mut());
        let mut d_cur = vec![0.0; self.output.input_dim()];
        matvec_t_acc(self.output.weight.data(), d_logits, &mut d_cur);
        for (l, layer) in self.hidden.iter().enumerate().rev() {
            // The input of layer l+1 is this layer's post-ReLU output.
            let post = &trace.inputs[l + 1];
            let d_pre: Vec<f64> = d_cur
                .iter()
                .zip(post)
                .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
                .collect();
            outer_acc(grads.hidden[l].weight.data_mut(), &d_pre, &trace.inputs[l]);
            axpy(1.0, &d_pre, grads.hidden[l].bias.data_mut());
            let mut d_in = vec![0.0; layer.input_dim()];
            matvec_t_acc(layer.weight.data(), &d_pre, &mut d_in);
            d_cur = d_in;
        }
        d_cur
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        if features.rank() != 1 {
            return Err(Error::dim("mlp_forward", features.shape(), &[self.input_dim()]));
        }
        Tensor::vector(self.forward_trace(features.data())?.logits)
    }

    pub(crate) fn add_assign(&mut self, other: &MlpHead) {
        for (a, b) in self.parameters_mut().into_iter().zip(other.named_parameters()) {
            axpy(1.0, b.1.data(), a.data_mut());
        }
    }

    pub(crate) fn scale(&mut self, c: f64) {
        for t in self.parameters_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
}

impl Parameters for MlpHead {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("head.hidden{i}.weight"), &l.weight));
            out.push((format!("head.hidden{i}.bias"), &l.bias));
        }
        out.push(("head.output.weight".to_string(), &self.output.weight));
        out.push(("head.output.bias".to_string(), &self.output.bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.hidden.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }
}

/// Free-function form of [`MlpHead::forward`].
pub fn mlp_forward(features: &Tensor, head: &MlpHead) -> Result<Tensor> {
    head.forward(features)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_yield_output_bias() {
        let mut head = MlpHead::new(4, &[3], 2, &mut Rng::new(1)).unwrap();
        for t in head.parameters_mut() {
            t.data_mut().fill(0.0);
        }
        head.output_layer_mut().bias.data_mut().copy_from_slice(&[0.25, -1.5]);
        let x = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(head.forward(&x).unwrap().data(), &[0.25, -1.5]);
    }

    #[test]
    fn relu_kills_negative_hidden_units() {
        let mut head = MlpHead::new(2, &[3], 2, &mut Rng::new(2)).unwrap();
        head.hidden_layers_mut()[0].weight.data_mut().fill(1.0);
        head.hidden_layers_mut()[0].bias.data_mut().fill(-10.0);
        head.output_layer_mut().bias.data_mut().copy_from_slice(&[0.5, 0.75]);
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert_eq!(mlp_forward(&x, &head).unwrap().data(), &[0.5, 0.75]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let head = MlpHead::new(4, &[3], 2, &mut Rng::new(1)).unwrap();
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(matches!(head.forward(&x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn xavier_limit_is_respected() {
        let head = MlpHead::new(10, &[6], 2, &mut Rng::new(3)).unwrap();
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(head.hidden_layers()[0].weight.data().iter().all(|w| w.abs() < limit));
        assert!(head.hidden_layers()[0].bias.data().iter().all(|&b| b == 0.0));
    }
}
