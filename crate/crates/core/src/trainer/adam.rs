use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::policy::{ParamGrads, PolicyError, PolicyParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("adam betas must be in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return Err("adam eps must be > 0".into());
        }
        Ok(())
    }
}

/// First and second moments per coordinate, shaped like the policy tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &PolicyParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected update. Tensors whose moments stay exactly zero are
    /// left untouched (same storage).
    pub fn update(
        &mut self,
        params: &PolicyParams,
        grads: &ParamGrads,
        cfg: &AdamConfig,
    ) -> Result<PolicyParams, PolicyError> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let mut out = params.clone();
        for (i, tensor) in params.tensors().iter().enumerate() {
            let g = &grads.tensors[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            }
            if m.iter().all(|&x| x == 0.0) || cfg.learning_rate == 0.0 {
                continue;
            }
            let data: Vec<f64> = tensor
                .data()
                .iter()
                .enumerate()
                .map(|(k, &x)| {
                    let step = cfg.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
                    x - step
                })
                .collect();
            out.replace_tensor(i, Tensor::new(tensor.shape().to_vec(), data)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;

    fn small() -> PolicyParams {
        let cfg = PolicyConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            exit_depths: vec![1],
            context_len: 8,
            ..PolicyConfig::default()
        };
        PolicyParams::init(&cfg, 0).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let p = small();
        let mut g = ParamGrads::zeros(&p);
        g.tensors[0][0] = 3.0;
        g.tensors[0][1] = -0.5;
        let mut adam = AdamState::new(&p);
        let q = adam.update(&p, &g, &AdamConfig::with_lr(0.1)).unwrap();
        let (a, b) = (p.tensors()[0].data(), q.tensors()[0].data());
        // |m̂| / (sqrt(v̂) + eps) = |g| / (|g| + eps) on the first step.
        let eps = AdamConfig::with_lr(0.1).eps;
        assert!((a[0] - b[0] - 0.1 * 3.0 / (3.0 + eps)).abs() < 1e-15);
        assert!((b[1] - a[1] - 0.1 * 0.5 / (0.5 + eps)).abs() < 1e-15);
        assert_eq!(a[2].to_bits(), b[2].to_bits());
        for i in 1..p.tensors().len() {
            assert!(p.tensors()[i].shares_storage(&q.tensors()[i]));
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let p = small();
        let mut g = ParamGrads::zeros(&p);
        g.tensors.iter_mut().flatten().for_each(|x| *x = 1.0);
        let mut adam = AdamState::new(&p);
        let mut q = p.clone();
        for _ in 0..5 {
            q = adam.update(&q, &g, &AdamConfig::with_lr(0.0)).unwrap();
        }
        assert_eq!(p.flatten(), q.flatten());
    }

    #[test]
    fn matches_reference_formula_over_steps() {
        let p = small();
        let cfg = AdamConfig::with_lr(0.01);
        let mut adam = AdamState::new(&p);
        let mut q = p.clone();
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, p.tensors()[0].data()[0]);
        for step in 1..=4 {
            let gval = 0.3 * step as f64 - 0.5;
            let mut g = ParamGrads::zeros(&p);
            g.tensors[0][0] = gval;
            q = adam.update(&q, &g, &cfg).unwrap();
            m = 0.9 * m + 0.1 * gval;
            v = 0.999 * v + 0.001 * gval * gval;
            let mh = m / (1.0 - 0.9f64.powi(step));
            let vh = v / (1.0 - 0.999f64.powi(step));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((q.tensors()[0].data()[0] - x).abs() < 1e-15);
        }
    }
}
