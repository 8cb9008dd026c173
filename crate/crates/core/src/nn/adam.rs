use serde::{Deserialize, Serialize};

use super::Parameterized;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moments are laid out in the
/// parameter visit order of the model being optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<T>,
    second: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Adam {
            config,
            step: 0,
            first: vec![T::zero(); num_params],
            second: vec![T::zero(); num_params],
        }
    }

    pub fn for_model<P: Parameterized<T>>(config: AdamConfig, model: &P) -> Self {
        Self::new(config, model.num_params())
    }

    pub fn update<P: Parameterized<T>>(&mut self, params: &mut P, grads: &P) {
        let g = grads.flat();
        assert_eq!(g.len(), self.first.len(), "gradient length does not match optimizer state");
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::of(c.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        let one = T::one();
        let (m, v) = (&mut self.first, &mut self.second);
        let mut off = 0;
        params.visit_mut("", &mut |_, _, p| {
            for (k, w) in p.iter_mut().enumerate() {
                let i = off + k;
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                *w -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
            off += p.len();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use ndarray::array;

    fn scalar_param(v: f64) -> Dense<f64> {
        Dense {
            weight: array![[v]],
            bias: array![0.0],
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_param(1.0);
        let g = scalar_param(0.0);
        let mut adam = Adam::for_model(AdamConfig::default(), &p);
        adam.update(&mut p, &g);
        assert_eq!(p.weight[[0, 0]], 1.0);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected m̂ = g and v̂ = g², so the step is lr · g/(|g| + ε)
        let mut p = scalar_param(1.0);
        let g = scalar_param(1.0);
        let mut adam = Adam::for_model(AdamConfig::default(), &p);
        adam.update(&mut p, &g);
        assert!((p.weight[[0, 0]] - 0.999).abs() < 1e-10);
    }

    #[test]
    fn deterministic_from_same_state() {
        let g = scalar_param(-0.3);
        let mut p1 = scalar_param(0.5);
        let mut a1 = Adam::for_model(AdamConfig::default(), &p1);
        a1.update(&mut p1, &g);
        let (mut p2, mut a2) = (p1.clone(), a1.clone());
        a1.update(&mut p1, &g);
        a2.update(&mut p2, &g);
        assert_eq!(p1, p2);
        assert_eq!(a1, a2);
    }
}
