//! Adam with bias correction, plus the cosine learning-rate schedule.

use ndarray::{ArrayD, ArrayViewMutD};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state is positional: callers must pass parameter views and
/// gradients in the same fixed order every step.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[&[usize]]) -> Self {
        let m = shapes.iter().map(|s| ArrayD::zeros(s.to_vec())).collect();
        let v = shapes.iter().map(|s| ArrayD::zeros(s.to_vec())).collect();
        Adam { cfg, t: 0, m, v }
    }

    pub fn for_params(cfg: AdamConfig, params: &[ndarray::ArrayViewD<f32>]) -> Self {
        let m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let v = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Adam { cfg, t: 0, m, v }
    }

    pub fn step(&mut self, lr: f64, params: &mut [ArrayViewMutD<f32>], grads: &[ArrayD<f32>]) {
        assert_eq!(params.len(), self.m.len(), "param count");
        assert_eq!(grads.len(), self.m.len(), "grad count");
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let eps = self.cfg.eps as f32;
        let b1f = b1 as f32;
        let b2f = b2 as f32;
        let scale = (lr / bc1) as f32;
        let vc = (1.0 / bc2) as f32;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "param/grad shape");
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|pv, &gv, mv, vv| {
                    *mv = b1f * *mv + (1.0 - b1f) * gv;
                    *vv = b2f * *vv + (1.0 - b2f) * gv * gv;
                    let vhat = *vv * vc;
                    *pv -= scale * *mv / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Cosine decay from `base_lr` at step 0 toward 0 at `total_steps`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(3e-4, 0, 100) - 3e-4).abs() < 1e-12);
        assert!((cosine_lr(3e-4, 50, 100) - 1.5e-4).abs() < 1e-12);
        assert!(cosine_lr(3e-4, 100, 100).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g).
        let mut p = arr1(&[1.0f32, -2.0]).into_dyn();
        let g = arr1(&[0.5f32, -0.25]).into_dyn();
        let mut adam = Adam::new(AdamConfig::default(), &[&[2]]);
        adam.step(0.1, &mut [p.view_mut()], &[g]);
        assert!((p[[0]] - 0.9).abs() < 1e-4);
        assert!((p[[1]] + 1.9).abs() < 1e-4);
    }
}
