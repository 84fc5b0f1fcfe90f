use super::tensor::Tensor;
use crate::error::{contract, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam moments for an ordered list of parameter tensors.
///
/// Moments are allocated lazily on the first step and checked against the
/// parameter shapes on every later step.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update using each tensor's accumulated gradient.
    /// Tensors without a gradient buffer are left alone.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(contract(format!("optimizer tracks {} tensors, got {}", self.first.len(), params.len())));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.first[i].len() {
                return Err(contract(format!(
                    "parameter {i} has {} elements, moments have {}",
                    p.numel(),
                    self.first[i].len()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = S::one() - S::of(c.beta1).powi(t);
        let bc2 = S::one() - S::of(c.beta2).powi(t);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (lr, eps) = (S::of(c.lr), S::of(c.eps));
        for (i, p) in params.iter_mut().enumerate() {
            // tensors without a gradient are skipped, moments untouched
            let Some(g) = p.grad().map(<[S]>::to_vec) else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((x, mi), vi), gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::<f64>::from_vec(vec![1.0, -2.0, 3.0]).trainable();
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default());
        p.accumulate_grad(&[0.0; 3]).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), before.data());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::<f64>::from_vec(vec![0.5, 0.5, 0.5, 0.5]).trainable();
        let g = [3.0, -0.2, 1e-3, -40.0];
        p.accumulate_grad(&g).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [&mut p]).unwrap();
        for (x, gi) in p.data().iter().zip(g) {
            let expected = 0.5 - 1e-3 * gi.signum();
            assert!((x - expected).abs() < 1e-6, "{x} vs {expected}");
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut a = Tensor::<f32>::zeros(&[3]).trainable();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [&mut a]).unwrap();
        let mut b = Tensor::<f32>::zeros(&[4]).trainable();
        assert!(adam.step(&mut [&mut b]).is_err());
        let mut c = Tensor::<f32>::zeros(&[3]).trainable();
        assert!(adam.step(&mut [&mut a, &mut c]).is_err());
    }

    /// Independent scalar Adam written directly from the update rule.
    fn oracle_adam(mut x: Vec<f64>, grad: impl Fn(&[f64]) -> Vec<f64>, steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut m = vec![0.0; x.len()];
        let mut v = vec![0.0; x.len()];
        for t in 1..=steps {
            let g = grad(&x);
            for i in 0..x.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t as i32));
                let vh = v[i] / (1.0 - b2.powi(t as i32));
                x[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        x
    }

    #[test]
    fn convex_quadratic_descends_and_matches_oracle() {
        // f(x) = Σ w_i (x_i − c_i)²
        let w = [1.0, 4.0, 0.25];
        let c = [0.3, -1.0, 2.0];
        let f = |x: &[f64]| x.iter().zip(w).zip(c).map(|((x, w), c)| w * (x - c) * (x - c)).sum::<f64>();
        let grad = |x: &[f64]| x.iter().zip(w).zip(c).map(|((x, w), c)| 2.0 * w * (x - c)).collect::<Vec<_>>();
        let x0 = vec![2.0, 1.0, -1.0];
        let mut p = Tensor::<f64>::from_vec(x0.clone()).trainable();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.05));
        let mut prev = f(&x0);
        for _ in 0..100 {
            p.zero_grad();
            p.accumulate_grad(&grad(p.data())).unwrap();
            adam.step(&mut [&mut p]).unwrap();
            let cur = f(p.data());
            assert!(cur <= prev + 1e-12 || cur < f(&x0));
            prev = cur;
        }
        assert!(prev < f(&x0));
        let expected = oracle_adam(x0, grad, 100, 0.05);
        for (a, b) in p.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
