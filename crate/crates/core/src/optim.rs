//! SGD with momentum and weight decay.

use serde::{Deserialize, Serialize};

/// Optimizer settings for the few-shot regression loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub iterations: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 1e-5,
            iterations: 10,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0) {
            return Err(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return Err(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.iterations == 0 {
            return Err("iterations must be positive".into());
        }
        Ok(())
    }
}

/// One parameter update:
///   g' = g + weight_decay * w
///   v  = momentum * v + g'
///   w  = w - lr * v
///
/// `lr` is passed separately so schedules can override the config value.
pub fn sgd_update(w: &mut [f32], v: &mut [f32], g: &[f32], cfg: &SgdConfig, lr: f32) {
    debug_assert_eq!(w.len(), v.len());
    debug_assert_eq!(w.len(), g.len());
    let mu = cfg.momentum;
    let wd = cfg.weight_decay;
    for i in 0..w.len() {
        let gp = g[i] + wd * w[i];
        v[i] = mu * v[i] + gp;
        w[i] -= lr * v[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f32, momentum: f32, weight_decay: f32) -> SgdConfig {
        SgdConfig {
            lr,
            momentum,
            weight_decay,
            iterations: 10,
        }
    }

    #[test]
    fn plain_step() {
        let mut w = vec![1.0f32];
        let mut v = vec![0.0f32];
        let c = cfg(1.0, 0.0, 0.0);
        sgd_update(&mut w, &mut v, &[0.1], &c, c.lr);
        assert!((w[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn momentum_recurrence() {
        // v1 = 0.1, w = 0.9; v2 = 0.9*0.1 + 0.1 = 0.19, w = 0.71
        let mut w = vec![1.0f32];
        let mut v = vec![0.0f32];
        let c = cfg(1.0, 0.9, 0.0);
        sgd_update(&mut w, &mut v, &[0.1], &c, c.lr);
        assert!((v[0] - 0.1).abs() < 1e-7);
        assert!((w[0] - 0.9).abs() < 1e-7);
        sgd_update(&mut w, &mut v, &[0.1], &c, c.lr);
        assert!((v[0] - 0.19).abs() < 1e-7);
        assert!((w[0] - 0.71).abs() < 1e-7);
    }

    #[test]
    fn decay_only_update() {
        let mut w = vec![1.0f32];
        let mut v = vec![0.0f32];
        let c = cfg(1.0, 0.0, 0.1);
        sgd_update(&mut w, &mut v, &[0.0], &c, c.lr);
        assert!((w[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn defaults_match_contract() {
        let d = SgdConfig::default();
        assert_eq!(d.lr, 1.0);
        assert_eq!(d.momentum, 0.9);
        assert_eq!(d.weight_decay, 1e-5);
        assert_eq!(d.iterations, 10);
        assert!(d.validate().is_ok());
    }

    #[test]
    fn validate_rejects_bad_fields() {
        assert!(cfg(0.0, 0.9, 0.0).validate().is_err());
        assert!(cfg(1.0, 1.0, 0.0).validate().is_err());
        assert!(cfg(1.0, 0.9, -0.1).validate().is_err());
    }
}
