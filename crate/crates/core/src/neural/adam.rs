use serde::{Deserialize, Serialize};

use super::mlp::{MlpGrads, MlpParams};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one `MlpParams`; accumulators share its layer shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: MlpGrads,
    second: MlpGrads,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: params.zero_grads(),
            second: params.zero_grads(),
        }
    }

    pub fn first_moment(&self) -> &MlpGrads {
        &self.first
    }

    pub fn second_moment(&self) -> &MlpGrads {
        &self.second
    }

    /// One bias-corrected Adam update applied in place.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
        params.check_grads(grads)?;
        params.check_grads(&self.first)?;
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((layer, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first.layers)
            .zip(&mut self.second.layers)
        {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            };
            for (((p, &gv), mv), vv) in layer
                .weight
                .iter_mut()
                .zip(g.weight.iter())
                .zip(m.weight.iter_mut())
                .zip(v.weight.iter_mut())
            {
                update(p, gv, mv, vv);
            }
            for (((p, &gv), mv), vv) in layer
                .bias
                .iter_mut()
                .zip(g.bias.iter())
                .zip(m.bias.iter_mut())
                .zip(v.bias.iter_mut())
            {
                update(p, gv, mv, vv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::mlp::{Activation, Dense};
    use nalgebra::{DMatrix, DVector};

    fn quadratic_params(w: f64) -> MlpParams {
        MlpParams::new(vec![Dense {
            weight: DMatrix::from_element(1, 2, w),
            bias: DVector::from_element(1, w),
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = quadratic_params(0.7);
        let before = p.clone();
        let mut s = AdamState::new(&p, AdamConfig::default());
        let zero = p.zero_grads();
        s.step(&mut p, &zero).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = quadratic_params(0.0);
        let mut s = AdamState::new(&p, AdamConfig::with_lr(0.01));
        let mut g = p.zero_grads();
        g.layers[0].weight[(0, 0)] = 3.0;
        g.layers[0].weight[(0, 1)] = -0.2;
        g.layers[0].bias[0] = 1e-3;
        s.step(&mut p, &g).unwrap();
        assert!((p.layers[0].weight[(0, 0)] + 0.01).abs() < 1e-8);
        assert!((p.layers[0].weight[(0, 1)] - 0.01).abs() < 1e-7);
        assert!((p.layers[0].bias[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn minimizes_convex_quadratic() {
        // f(θ) = Σ (θ_j - c_j)^2 with minimizer c
        let target = [1.5, -2.0, 0.25];
        let mut p = quadratic_params(0.0);
        let mut s = AdamState::new(&p, AdamConfig::with_lr(0.01));
        for _ in 0..5000 {
            let flat = p.to_flat();
            let grad_flat: Vec<f64> = flat.iter().zip(target).map(|(x, c)| 2.0 * (x - c)).collect();
            let mut g = p.zero_grads();
            g.layers[0].weight[(0, 0)] = grad_flat[0];
            g.layers[0].weight[(0, 1)] = grad_flat[1];
            g.layers[0].bias[0] = grad_flat[2];
            s.step(&mut p, &g).unwrap();
        }
        for (x, c) in p.to_flat().iter().zip(target) {
            assert!((x - c).abs() < 1e-4, "{x} vs {c}");
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = quadratic_params(0.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let other = MlpParams::new(vec![Dense {
            weight: DMatrix::zeros(2, 2),
            bias: DVector::zeros(2),
            activation: Activation::Identity,
        }])
        .unwrap();
        assert!(s.step(&mut p, &other.zero_grads()).is_err());
    }
}
