//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for each parameter tensor plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    t: u64,
    shapes: Vec<Vec<usize>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Result<Self> {
        if !(config.lr >= 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Parameter(format!("invalid Adam hyperparameters {config:?}")));
        }
        Ok(AdamState {
            config,
            t: 0,
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update. Gradients are validated before anything is modified, so a
    /// rejected step leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(Error::dim("adam_step", &[params.len(), grads.len()], &[self.shapes.len()]));
        }
        for ((p, g), shape) in params.iter().zip(grads).zip(&self.shapes) {
            if p.shape() != shape.as_slice() || g.shape() != shape.as_slice() {
                return Err(Error::dim("adam_step", g.shape(), shape));
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {i} at index {pos}; step aborted"
                )));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor {
        Tensor::vector(vec![x]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::vector(vec![0.5, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut s = AdamState::new(AdamConfig::with_lr(1e-3), &[&p]).unwrap();
        s.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[0.5, -2.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn closed_form_first_and_second_steps() {
        let lr = 1e-3;
        let mut p = scalar(0.0);
        let g = scalar(1.0);
        let mut s = AdamState::new(AdamConfig::with_lr(lr), &[&p]).unwrap();
        adam_step(&mut [&mut p], &[&g], &mut s).unwrap();
        let first = -lr / (1.0 + 1e-8);
        assert!((p.data()[0] - first).abs() < 1e-8);
        assert!((p.data()[0] + 0.001).abs() < 1e-8);
        adam_step(&mut [&mut p], &[&g], &mut s).unwrap();
        assert!((p.data()[0] + 0.002).abs() < 1e-8);
        assert_eq!(s.step_count(), 2);
    }

    #[test]
    fn nan_gradient_aborts_without_side_effects() {
        let mut p = scalar(1.0);
        let mut s = AdamState::new(AdamConfig::with_lr(0.1), &[&p]).unwrap();
        let bad = Tensor::from_parts_unchecked(vec![1], vec![f64::NAN]);
        assert!(matches!(s.step(&mut [&mut p], &[&bad]), Err(Error::Numeric(_))));
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(s.step_count(), 0);
        assert_eq!(s.first_moments()[0], vec![0.0]);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = Tensor::vector(vec![0.1, 0.2, -0.3]).unwrap();
        let before = p.clone();
        let g = Tensor::vector(vec![5.0, -1.0, 0.25]).unwrap();
        let mut s = AdamState::new(AdamConfig::with_lr(0.0), &[&p]).unwrap();
        for _ in 0..10 {
            s.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar(0.0);
        let g = Tensor::zeros(&[2]);
        let mut s = AdamState::new(AdamConfig::with_lr(0.1), &[&p]).unwrap();
        assert!(matches!(s.step(&mut [&mut p], &[&g]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn moments_mirror_parameter_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4]);
        let s = AdamState::new(AdamConfig::with_lr(0.1), &[&a, &b]).unwrap();
        assert_eq!(s.first_moments()[0].len(), 6);
        assert_eq!(s.second_moments()[1].len(), 4);
    }
}
