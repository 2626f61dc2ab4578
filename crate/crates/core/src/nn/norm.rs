//! Batch and instance normalization.

use ndarray::{Array1, Array2, Array4, Axis};

/// BatchNorm over (B, H, W) per channel. Train mode normalizes with batch
/// statistics and updates the running estimates; eval mode uses the stored
/// running statistics and mutates nothing.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub momentum: f32,
    pub eps: f32,
}

pub struct BnCache {
    pub train: bool,
    pub x_hat: Array4<f32>,
    pub inv_std: Array1<f32>,
    /// Biased batch statistics of the pre-BN input, recorded in both modes so
    /// the BN-statistics alignment loss can read them under a frozen model.
    pub batch_mean: Array1<f32>,
    pub batch_var: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Eval-mode forward that cannot touch the running statistics; batch
    /// statistics of the input are still recorded in the cache.
    pub fn forward_frozen(&self, x: &Array4<f32>) -> (Array4<f32>, BnCache) {
        let mut scratch = self.clone();
        let (y, cache) = scratch.forward(x, false);
        (y, cache)
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> (Array4<f32>, BnCache) {
        let (b, c, h, w) = x.dim();
        let n = (b * h * w) as f32;
        let mut batch_mean = Array1::<f32>::zeros(c);
        let mut batch_var = Array1::<f32>::zeros(c);
        for ch in 0..c {
            let plane = x.index_axis(Axis(1), ch);
            let mean = plane.sum() / n;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
            batch_mean[ch] = mean;
            batch_var[ch] = var;
        }

        let (norm_mean, norm_var) = if train {
            (batch_mean.clone(), batch_var.clone())
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std = norm_var.mapv(|v| 1.0 / (v + self.eps).sqrt());

        let mut x_hat = x.clone();
        for ch in 0..c {
            let m = norm_mean[ch];
            let is = inv_std[ch];
            x_hat
                .index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - m) * is);
        }
        let mut y = x_hat.clone();
        for ch in 0..c {
            let g = self.gamma[ch];
            let bb = self.beta[ch];
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * g + bb);
        }

        if train {
            // unbiased variance feeds the running estimate
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            for ch in 0..c {
                self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * batch_mean[ch];
                self.running_var[ch] =
                    (1.0 - m) * self.running_var[ch] + m * batch_var[ch] * unbias;
            }
        }

        (
            y,
            BnCache {
                train,
                x_hat,
                inv_std,
                batch_mean,
                batch_var,
            },
        )
    }

    /// Returns (dx, d_gamma, d_beta).
    pub fn backward(
        &self,
        cache: &BnCache,
        d_out: &Array4<f32>,
    ) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
        let (b, c, h, w) = d_out.dim();
        let n = (b * h * w) as f32;
        let mut d_gamma = Array1::<f32>::zeros(c);
        let mut d_beta = Array1::<f32>::zeros(c);
        for ch in 0..c {
            let dy = d_out.index_axis(Axis(1), ch);
            let xh = cache.x_hat.index_axis(Axis(1), ch);
            d_gamma[ch] = dy.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            d_beta[ch] = dy.sum();
        }

        let mut dx = Array4::<f32>::zeros(d_out.dim());
        for ch in 0..c {
            let g = self.gamma[ch];
            let is = cache.inv_std[ch];
            let dy = d_out.index_axis(Axis(1), ch);
            let xh = cache.x_hat.index_axis(Axis(1), ch);
            let mut dst = dx.index_axis_mut(Axis(1), ch);
            if cache.train {
                let mean_dy = d_beta[ch] / n;
                let mean_dy_xh = d_gamma[ch] / n;
                ndarray::Zip::from(&mut dst)
                    .and(&dy)
                    .and(&xh)
                    .for_each(|d, &dyv, &xhv| {
                        *d = g * is * (dyv - mean_dy - xhv * mean_dy_xh);
                    });
            } else {
                ndarray::Zip::from(&mut dst).and(&dy).for_each(|d, &dyv| {
                    *d = g * is * dyv;
                });
            }
        }
        (dx, d_gamma, d_beta)
    }
}

/// Gradient of a loss on the biased batch statistics, routed back to the
/// activations they were computed from: da = dmean/N + dvar * 2(a - mean)/N.
pub fn stats_backward(
    a: &Array4<f32>,
    batch_mean: &Array1<f32>,
    d_mean: &Array1<f32>,
    d_var: &Array1<f32>,
) -> Array4<f32> {
    let (b, c, h, w) = a.dim();
    let n = (b * h * w) as f32;
    let mut da = Array4::<f32>::zeros(a.dim());
    for ch in 0..c {
        let m = batch_mean[ch];
        let dm = d_mean[ch] / n;
        let dv = d_var[ch] * 2.0 / n;
        let src = a.index_axis(Axis(1), ch);
        let mut dst = da.index_axis_mut(Axis(1), ch);
        ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &av| {
            *d = dm + dv * (av - m);
        });
    }
    da
}

/// Instance norm without affine parameters: each (image, channel) plane is
/// normalized over its own H*W positions.
#[derive(Debug, Clone, Copy)]
pub struct InstanceNorm2d {
    pub eps: f32,
}

pub struct InCache {
    pub x_hat: Array4<f32>,
    pub inv_std: Array2<f32>, // (B, C)
}

impl Default for InstanceNorm2d {
    fn default() -> Self {
        InstanceNorm2d { eps: 1e-5 }
    }
}

impl InstanceNorm2d {
    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, InCache) {
        let (b, c, h, w) = x.dim();
        let p = (h * w) as f32;
        let mut x_hat = x.clone();
        let mut inv_std = Array2::<f32>::zeros((b, c));
        for bi in 0..b {
            for ch in 0..c {
                let mut plane = x_hat.slice_mut(ndarray::s![bi, ch, .., ..]);
                let mean = plane.sum() / p;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / p;
                let is = 1.0 / (var + self.eps).sqrt();
                plane.mapv_inplace(|v| (v - mean) * is);
                inv_std[[bi, ch]] = is;
            }
        }
        (x_hat.clone(), InCache { x_hat, inv_std })
    }

    pub fn backward(&self, cache: &InCache, d_out: &Array4<f32>) -> Array4<f32> {
        let (b, c, h, w) = d_out.dim();
        let p = (h * w) as f32;
        let mut dx = Array4::<f32>::zeros(d_out.dim());
        for bi in 0..b {
            for ch in 0..c {
                let dy = d_out.slice(ndarray::s![bi, ch, .., ..]);
                let xh = cache.x_hat.slice(ndarray::s![bi, ch, .., ..]);
                let is = cache.inv_std[[bi, ch]];
                let mean_dy = dy.sum() / p;
                let mean_dy_xh =
                    dy.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<f32>() / p;
                let mut dst = dx.slice_mut(ndarray::s![bi, ch, .., ..]);
                ndarray::Zip::from(&mut dst)
                    .and(&dy)
                    .and(&xh)
                    .for_each(|d, &dyv, &xhv| {
                        *d = is * (dyv - mean_dy - xhv * mean_dy_xh);
                    });
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn bn_train_normalizes_batch() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let x = Array4::from_shape_fn((4, 3, 5, 5), |_| rng.random_range(-2.0..2.0f32));
        let mut bn = BatchNorm2d::new(3);
        let (y, _) = bn.forward(&x, true);
        for ch in 0..3 {
            let plane = y.index_axis(Axis(1), ch);
            let n = plane.len() as f32;
            let mean = plane.sum() / n;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn bn_eval_is_pure() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = Array4::from_shape_fn((2, 2, 4, 4), |_| rng.random_range(-1.0..1.0f32));
        let mut bn = BatchNorm2d::new(2);
        bn.running_mean = ndarray::arr1(&[0.3, -0.1]);
        bn.running_var = ndarray::arr1(&[0.8, 1.2]);
        let before = (bn.running_mean.clone(), bn.running_var.clone());
        let (y1, _) = bn.forward(&x, false);
        let (y2, _) = bn.forward(&x, false);
        assert_eq!(y1, y2);
        assert_eq!(before.0, bn.running_mean);
        assert_eq!(before.1, bn.running_var);
    }

    #[test]
    fn bn_train_backward_matches_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.random_range(-1.0..1.0f32));
        let coeffs = Array4::from_shape_fn(x.dim(), |_| rng.random_range(-1.0..1.0f32));
        let bn0 = {
            let mut bn = BatchNorm2d::new(2);
            bn.gamma = ndarray::arr1(&[1.3, 0.7]);
            bn.beta = ndarray::arr1(&[0.1, -0.2]);
            bn
        };
        let loss = |x: &Array4<f32>| -> f32 {
            let mut bn = bn0.clone();
            let (y, _) = bn.forward(x, true);
            (&y * &coeffs).sum()
        };
        let mut bn = bn0.clone();
        let (_, cache) = bn.forward(&x, true);
        let (dx, _, _) = bn.backward(&cache, &coeffs);
        let eps = 1e-2f32;
        for &(bi, c, i, j) in &[(0, 0, 0, 0), (1, 1, 2, 1), (2, 0, 1, 2)] {
            let mut xp = x.clone();
            xp[[bi, c, i, j]] += eps;
            let mut xm = x.clone();
            xm[[bi, c, i, j]] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!(
                (fd - dx[[bi, c, i, j]]).abs() < 2e-2,
                "fd {fd} vs {}",
                dx[[bi, c, i, j]]
            );
        }
    }

    #[test]
    fn instance_norm_backward_matches_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = Array4::from_shape_fn((2, 2, 4, 4), |_| rng.random_range(-1.0..1.0f32));
        let coeffs = Array4::from_shape_fn(x.dim(), |_| rng.random_range(-1.0..1.0f32));
        let inorm = InstanceNorm2d::default();
        let loss = |x: &Array4<f32>| -> f32 {
            let (y, _) = inorm.forward(x);
            (&y * &coeffs).sum()
        };
        let (_, cache) = inorm.forward(&x);
        let dx = inorm.backward(&cache, &coeffs);
        let eps = 1e-2f32;
        for &(bi, c, i, j) in &[(0, 0, 1, 1), (1, 1, 3, 0)] {
            let mut xp = x.clone();
            xp[[bi, c, i, j]] += eps;
            let mut xm = x.clone();
            xm[[bi, c, i, j]] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!(
                (fd - dx[[bi, c, i, j]]).abs() < 2e-2,
                "fd {fd} vs {}",
                dx[[bi, c, i, j]]
            );
        }
    }

    #[test]
    fn stats_backward_matches_fd() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.random_range(-1.0..1.0f32));
        let d_mean = ndarray::arr1(&[0.7f32, -0.3]);
        let d_var = ndarray::arr1(&[0.2f32, 0.9]);
        // loss = sum_c d_mean[c]*mean_c + d_var[c]*var_c
        let loss = |a: &Array4<f32>| -> f32 {
            let n = (a.dim().0 * a.dim().2 * a.dim().3) as f32;
            let mut total = 0.0;
            for ch in 0..2 {
                let plane = a.index_axis(Axis(1), ch);
                let mean = plane.sum() / n;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
                total += d_mean[ch] * mean + d_var[ch] * var;
            }
            total
        };
        let n = (a.dim().0 * a.dim().2 * a.dim().3) as f32;
        let mut mean = Array1::<f32>::zeros(2);
        for ch in 0..2 {
            mean[ch] = a.index_axis(Axis(1), ch).sum() / n;
        }
        let da = stats_backward(&a, &mean, &d_mean, &d_var);
        let eps = 1e-2f32;
        for &(bi, c, i, j) in &[(0, 0, 0, 0), (1, 1, 2, 2)] {
            let mut ap = a.clone();
            ap[[bi, c, i, j]] += eps;
            let mut am = a.clone();
            am[[bi, c, i, j]] -= eps;
            let fd = (loss(&ap) - loss(&am)) / (2.0 * eps);
            assert!((fd - da[[bi, c, i, j]]).abs() < 1e-3);
        }
    }
}
