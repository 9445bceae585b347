use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::{FreezeMask, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup steps followed by inverse-square-root decay.
    pub warmup: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 400,
        }
    }
}

impl AdamConfig {
    /// Learning rate for update number `step` (1-based).
    pub fn rate(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        if self.warmup == 0 {
            return self.lr;
        }
        let w = self.warmup as f64;
        self.lr * (step / w).min((w / step).sqrt())
    }
}

/// Adam moments plus the training-loop position needed to resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Updates applied so far.
    pub step: u64,
    pub epoch: u64,
    /// Index of the next batch within the current epoch.
    pub cursor: u64,
    pub checkpoints: u64,
    pub best_perplexity: f64,
    pub bad_checkpoints: u64,
    pub m: Vec<Array2<f32>>,
    pub v: Vec<Array2<f32>>,
}

impl OptimizerState {
    pub fn new(model: &ModelParams<f32>) -> Self {
        let zeros: Vec<Array2<f32>> = model.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
        Self {
            step: 0,
            epoch: 0,
            cursor: 0,
            checkpoints: 0,
            best_perplexity: f64::INFINITY,
            bad_checkpoints: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub(crate) fn apply(
        &mut self,
        model: &mut ModelParams<f32>,
        grads: &[Array2<f32>],
        cfg: &AdamConfig,
        freeze: &FreezeMask,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let lr = cfg.rate(self.step);
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let step_size = (lr / c1) as f32;
        let sqrt_c2 = c2.sqrt() as f32;
        let (b1, b2, eps) = (cfg.beta1 as f32, cfg.beta2 as f32, cfg.eps as f32);
        let components: Vec<_> = model.layout().specs.iter().map(|s| s.component).collect();
        for (i, p) in model.tensors_mut().iter_mut().enumerate() {
            if freeze.contains(components[i]) {
                continue;
            }
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step_size * *m / (v.sqrt() / sqrt_c2 + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let c = AdamConfig::default();
        assert!((c.rate(400) - 3e-4).abs() < 1e-15);
        assert!((c.rate(200) - 1.5e-4).abs() < 1e-15);
        assert!((c.rate(1600) - 1.5e-4).abs() < 1e-15);
        let flat = AdamConfig { warmup: 0, ..c };
        assert_eq!(flat.rate(10_000), 3e-4);
    }
}
