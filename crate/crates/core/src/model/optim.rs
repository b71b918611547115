use super::params::ModelParams;
use super::ModelError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    /// lr 2e-5, weight decay 0.1, betas (0.9, 0.95), eps 1e-8.
    fn default() -> Self {
        Self { lr: 2e-5, weight_decay: 0.1, beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &ModelParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p ← p·(1 − lr·wd) − lr·m̂ / (√v̂ + ε)`.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<(), ModelError> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(ModelError::ShapeMismatch);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((p, g), m), v) in tensors {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] * decay - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> ModelParams {
        ModelParams::init(&ModelConfig::new(1, 2, 8, 10, 8).with_seed(1)).unwrap()
    }

    #[test]
    fn zero_grad_is_pure_decay() {
        let p0 = params();
        let mut p = p0.clone();
        let mut st = AdamWState::new(&p);
        adamw_step(&mut p, &p0.zeros_like(), &mut st, &AdamWConfig::default()).unwrap();
        let factor = 1.0 - 2e-5 * 0.1;
        assert_eq!(factor, 1.0 - 2e-6);
        for (a, b) in p.tensors().iter().zip(p0.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, y * factor);
            }
        }

        let mut q = p0.clone();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut q, &p0.zeros_like(), &mut AdamWState::new(&p0), &cfg).unwrap();
        assert_eq!(q, p0);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let p0 = params();
        let mut g = p0.zeros_like();
        g.w_out.fill(0.5);
        g.tok_emb.fill(-3.0);
        let mut p = p0.clone();
        let cfg = AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &g, &mut AdamWState::new(&p0), &cfg).unwrap();
        for (a, b) in p.w_out.iter().zip(&p0.w_out) {
            assert!((a - (b - 1e-3)).abs() < 1e-9);
        }
        for (a, b) in p.tok_emb.iter().zip(&p0.tok_emb) {
            assert!((a - (b + 1e-3)).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let p0 = params();
        let mut g = p0.clone();
        g.final_norm.fill(0.1);
        let run = || {
            let mut p = p0.clone();
            let mut st = AdamWState::new(&p);
            for _ in 0..2 {
                adamw_step(&mut p, &g, &mut st, &AdamWConfig::default()).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
        let other = ModelParams::init(&ModelConfig::new(2, 2, 8, 10, 8)).unwrap();
        let mut p = p0.clone();
        let mut st = AdamWState::new(&p0);
        assert!(matches!(adamw_step(&mut p, &other, &mut st, &AdamWConfig::default()), Err(ModelError::ShapeMismatch)));
    }
}
