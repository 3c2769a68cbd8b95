//! AdamW with decoupled weight decay and bias correction.

use crate::error::{LamError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
/// Moment buffers are allocated lazily on the first step and stay matched to
/// the parameter shapes.
pub struct AdamW<S: Scalar> {
    pub config: AdamWConfig,
    step_count: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Start one optimizer step over parameters of the given sizes (the
    /// ordering must be stable across calls), then feed each parameter
    /// through [`AdamW::update_param`].
    pub fn begin_step(&mut self, sizes: &[usize]) -> Result<()> {
        if self.m.is_empty() {
            self.m = sizes.iter().map(|&n| vec![S::zero(); n]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != sizes.len() {
            return Err(LamError::dim("adamw: parameter count changed"));
        }
        self.step_count += 1;
        Ok(())
    }

    /// Update the idx-th parameter in place with its gradient.
    pub fn update_param(&mut self, idx: usize, values: &mut [S], grad: &[S]) -> Result<()> {
        let t = self.step_count;
        let c = &self.config;
        let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
        let one = S::one();
        let lr = S::from_f64(c.learning_rate);
        let eps = S::from_f64(c.epsilon);
        let wd = S::from_f64(c.weight_decay);
        let bc1 = S::from_f64(1.0 - c.beta1.powi(t as i32));
        let bc2 = S::from_f64(1.0 - c.beta2.powi(t as i32));
        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        if grad.len() != values.len() || m.len() != values.len() {
            return Err(LamError::dim(format!(
                "adamw: param {idx}: {} values, {} grads, {} moments",
                values.len(),
                grad.len(),
                m.len()
            )));
        }
        for j in 0..grad.len() {
            m[j] = b1 * m[j] + (one - b1) * grad[j];
            v[j] = b2 * v[j] + (one - b2) * grad[j] * grad[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            values[j] = values[j] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * values[j]);
        }
        Ok(())
    }

    /// One update over an ordered parameter list.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Vec<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(LamError::dim(format!(
                "adamw: {} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        self.begin_step(&sizes)?;
        for (i, p) in params.iter_mut().enumerate() {
            self.update_param(i, p.values_mut(), &grads[i])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single_step(theta: f64, grad: f64, cfg: AdamWConfig) -> f64 {
        let mut opt: AdamW<f64> = AdamW::new(cfg);
        let mut p = Tensor::vector(vec![theta]);
        opt.step(&mut [&mut p], &[vec![grad]]).unwrap();
        p.values()[0]
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let out = single_step(1.25, 0.0, AdamWConfig::default());
        assert_eq!(out, 1.25);
    }

    #[test]
    fn bias_corrected_first_step() {
        // theta = 0, g = 1: m̂ = 1, v̂ = 1, so theta <- -lr / (1 + eps)
        let cfg = AdamWConfig::default();
        let out = single_step(0.0, 1.0, cfg.clone());
        let expected = -cfg.learning_rate * (1.0 / (1.0 + cfg.epsilon));
        assert_relative_eq!(out, expected, max_relative = 1e-12);
        assert_relative_eq!(out, -0.001, max_relative = 1e-6);
    }

    #[test]
    fn decay_only_step() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let out = single_step(1.0, 0.0, cfg.clone());
        assert_relative_eq!(
            out,
            1.0 - cfg.learning_rate * cfg.weight_decay,
            max_relative = 1e-12
        );
    }

    #[test]
    fn moment_shapes_follow_params() {
        let mut opt: AdamW<f64> = AdamW::new(AdamWConfig::default());
        let mut a = Tensor::vector(vec![0.0; 3]);
        let mut b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        opt.step(&mut [&mut a, &mut b], &[vec![1.0; 3], vec![1.0; 4]])
            .unwrap();
        assert_eq!(opt.m[0].len(), 3);
        assert_eq!(opt.v[1].len(), 4);
        assert_eq!(opt.step_count(), 1);
    }
}
