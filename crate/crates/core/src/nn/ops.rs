//! Elementwise activations, pooling, upsampling, and the softmax family.

use ndarray::{Array1, Array2, Array4, Axis};

pub fn relu(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(d_out: &Array4<f32>, y: &Array4<f32>) -> Array4<f32> {
    let mut dx = d_out.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn relu2(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu2_backward(d_out: &Array2<f32>, y: &Array2<f32>) -> Array2<f32> {
    let mut dx = d_out.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn tanh(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(f32::tanh)
}

pub fn tanh_backward(d_out: &Array4<f32>, y: &Array4<f32>) -> Array4<f32> {
    let mut dx = d_out.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        *d *= 1.0 - yv * yv;
    });
    dx
}

/// 2x2 max pooling, stride 2. Ties break toward the first cell in scan order
/// so the backward scatter is unambiguous. Requires even H and W.
pub fn maxpool2(x: &Array4<f32>) -> (Array4<f32>, Array4<u8>) {
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<f32>::zeros((b, c, oh, ow));
    let mut arg = Array4::<u8>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for k in 0..4u8 {
                        let (di, dj) = ((k / 2) as usize, (k % 2) as usize);
                        let v = x[[bi, ch, 2 * oy + di, 2 * ox + dj]];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    y[[bi, ch, oy, ox]] = best;
                    arg[[bi, ch, oy, ox]] = best_k;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(d_out: &Array4<f32>, arg: &Array4<u8>) -> Array4<f32> {
    let (b, c, oh, ow) = d_out.dim();
    let mut dx = Array4::<f32>::zeros((b, c, oh * 2, ow * 2));
    for bi in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let k = arg[[bi, ch, oy, ox]];
                    let (di, dj) = ((k / 2) as usize, (k % 2) as usize);
                    dx[[bi, ch, 2 * oy + di, 2 * ox + dj]] = d_out[[bi, ch, oy, ox]];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Array4<f32>) -> Array4<f32> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<f32>::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[bi, ch, i, j]];
                    y[[bi, ch, 2 * i, 2 * j]] = v;
                    y[[bi, ch, 2 * i, 2 * j + 1]] = v;
                    y[[bi, ch, 2 * i + 1, 2 * j]] = v;
                    y[[bi, ch, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(d_out: &Array4<f32>) -> Array4<f32> {
    let (b, c, h2, w2) = d_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[[bi, ch, i, j]] = d_out[[bi, ch, 2 * i, 2 * j]]
                        + d_out[[bi, ch, 2 * i, 2 * j + 1]]
                        + d_out[[bi, ch, 2 * i + 1, 2 * j]]
                        + d_out[[bi, ch, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    dx
}

/// Row-wise softmax with the max-shift trick; finite for logits up to ~1e38.
pub fn softmax(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f32 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean cross entropy over the batch plus its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Array2<f32>, labels: &[u8]) -> (f64, Array2<f32>) {
    let b = logits.dim().0;
    assert_eq!(b, labels.len());
    let probs = softmax(logits);
    let mut loss = 0.0f64;
    let mut d_logits = probs.clone();
    for (bi, &label) in labels.iter().enumerate() {
        let p = probs[[bi, label as usize]].max(1e-12);
        loss -= (p as f64).ln();
        d_logits[[bi, label as usize]] -= 1.0;
    }
    d_logits.mapv_inplace(|v| v / b as f32);
    (loss / b as f64, d_logits)
}

/// Argmax per row with ties broken toward the lowest class index.
pub fn argmax_rows(probs: &Array2<f32>) -> Array1<usize> {
    Array1::from_iter(probs.axis_iter(Axis(0)).map(|row| {
        let mut best = 0usize;
        let mut best_v = row[0];
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        best
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn softmax_rows_sum_to_one_and_survive_huge_logits() {
        let logits = arr2(&[[1e4f32, 0.0, -1e4], [2.0, 2.0, 2.0]]);
        let p = softmax(&logits);
        for row in p.axis_iter(Axis(0)) {
            let s: f32 = row.sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| v.is_finite()));
        }
        assert!((p[[0, 0]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let p = arr2(&[[0.3f32, 0.3, 0.4], [0.5, 0.5, 0.0]]);
        let a = argmax_rows(&p);
        assert_eq!(a[0], 2);
        assert_eq!(a[1], 0);
    }

    #[test]
    fn maxpool_roundtrip_gradient() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f32);
        let (y, arg) = maxpool2(&x);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        let dy = Array4::from_elem((1, 1, 2, 2), 1.0f32);
        let dx = maxpool2_backward(&dy, &arg);
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);
    }

    #[test]
    fn upsample_backward_sums_cells() {
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| (i * 2 + j) as f32);
        let y = upsample2(&x);
        assert_eq!(y[[0, 0, 3, 3]], 3.0);
        let dy = Array4::from_elem((1, 1, 4, 4), 0.5f32);
        let dx = upsample2_backward(&dy);
        assert!(dx.iter().all(|&v| (v - 2.0).abs() < 1e-6));
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let logits = arr2(&[[0.0f32, 0.0]]);
        let (loss, d) = cross_entropy(&logits, &[0]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((d[[0, 0]] + 0.5).abs() < 1e-6);
        assert!((d[[0, 1]] - 0.5).abs() < 1e-6);
    }
}
