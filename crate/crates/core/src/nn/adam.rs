use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam step. Entries with zero gradient and zero moments
/// stay exactly where they are.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::LengthMismatch(grads.len(), params.len()));
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::LengthMismatch(state.m.len(), params.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.3, -1.2, 4.0];
        let before = p.clone();
        let mut s = AdamState::new(3);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0; 3], &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_of_unit_gradient() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let cfg = AdamConfig::with_lr(0.1);
        adam_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
        // hand recurrence for the second step
        adam_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        let m2 = 0.9 * 0.1 + 0.1;
        let v2 = 0.999 * 0.001 + 0.001;
        let step2 = 0.1 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p[0] - (expect - step2)).abs() < 1e-14);
    }

    #[test]
    fn state_round_trips_through_json() {
        let mut p = vec![0.1, 0.2];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.3, -1.0 / 3.0], &mut s, &AdamConfig::default()).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: AdamState = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        for (a, b) in back.m.iter().chain(&back.v).zip(s.m.iter().chain(&s.v)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn length_mismatch() {
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut [0.0, 0.0], &[1.0], &mut s, &AdamConfig::default()).is_err());
    }
}
