//! Adam with either coupled (L2) or decoupled (AdamW) weight decay.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecay {
    /// `g += wd * theta` before the moment updates (torch `Adam`).
    Coupled,
    /// `theta -= lr * wd * theta` outside the adaptive step (torch `AdamW`).
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: WeightDecay,
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// `sizes` fixes the parameter groups and their lengths.
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Adam {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "parameter group count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient group count mismatch");
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            eps,
            weight_decay: wd,
            decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);

        for (g_idx, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[g_idx];
            let v = &mut self.v[g_idx];
            assert_eq!(param.len(), m.len());
            assert_eq!(grad.len(), m.len());
            for i in 0..m.len() {
                let mut g = grad[i];
                match decay {
                    WeightDecay::Coupled => g += wd * param[i],
                    WeightDecay::Decoupled => param[i] *= 1.0 - lr * wd,
                }
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(decay: WeightDecay, wd: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
            decay,
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut opt = Adam::new(cfg(WeightDecay::Coupled, 0.0), &[2]);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut [&mut p], &[&[2.0, -0.5]]);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut opt = Adam::new(cfg(WeightDecay::Decoupled, 0.5), &[1]);
        let mut p = vec![2.0];
        opt.step(&mut [&mut p], &[&[0.0]]);
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(cfg(WeightDecay::Coupled, 0.0), &[2]);
        let mut p = vec![3.0, -4.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 2.0)];
            opt.step(&mut [&mut p], &[&g]);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 2.0).abs() < 1e-3, "{p:?}");
    }
}
