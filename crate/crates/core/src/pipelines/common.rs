//! Shared pipeline plumbing: seed streams, f32/f64 conversion, accuracy,
//! and the softmax vector-Jacobian product used to route probability-space
//! gradients back to logits.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};

use crate::data::{BatchPlan, ImageSet};
use crate::error::Result;
use crate::models::Classifier;
use crate::nn::ops;

/// Seed streams, so initialization and shuffling never share RNG state.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;

/// splitmix64-style mix of (base seed, stream, index).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn epoch_plan(batch_size: usize, seed: u64, epoch: usize) -> BatchPlan {
    BatchPlan {
        batch_size,
        seed: derive_seed(seed, STREAM_SHUFFLE, epoch as u64),
        shuffle: true,
        drop_last: true,
    }
}

pub fn to_f64_2(a: ArrayView2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

pub fn to_f64_4(a: ArrayView4<f32>) -> Array4<f64> {
    a.mapv(f64::from)
}

pub fn to_f32_2(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

pub fn to_f32_4(a: &Array4<f64>) -> Array4<f32> {
    a.mapv(|v| v as f32)
}

/// Row-wise softmax VJP: given p = softmax(z) and dL/dp, return dL/dz.
pub fn softmax_vjp(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(probs.raw_dim());
    for ((mut dst, p), g) in out
        .axis_iter_mut(Axis(0))
        .zip(probs.axis_iter(Axis(0)))
        .zip(d_probs.axis_iter(Axis(0)))
    {
        let dot: f64 = p.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
        for ((d, &pv), &gv) in dst.iter_mut().zip(p.iter()).zip(g.iter()) {
            *d = pv * (gv - dot);
        }
    }
    out
}

/// Eval-mode accuracy of a classifier on a labeled set; argmax ties break
/// toward the lowest class index.
pub fn accuracy(model: &Classifier, set: &ImageSet, batch_size: usize) -> Result<f64> {
    let labels = set.labels().ok_or(crate::error::Error::UnlabeledData)?;
    let plan = BatchPlan {
        batch_size: batch_size.min(set.n()),
        seed: 0,
        shuffle: false,
        drop_last: false,
    };
    let mut correct = 0usize;
    let mut seen = 0usize;
    for batch in set.batches(&plan)? {
        let out = model.infer(&batch.images)?;
        let pred = ops::argmax_rows(&out.probs);
        let batch_labels = batch.labels.as_ref().expect("labeled set");
        for (p, &l) in pred.iter().zip(batch_labels.iter()) {
            if *p == l as usize {
                correct += 1;
            }
            seen += 1;
        }
    }
    debug_assert_eq!(seen, labels.len());
    Ok(correct as f64 / seen as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 2, 0));
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 1, 1));
        assert_eq!(derive_seed(7, 1, 3), derive_seed(7, 1, 3));
    }

    #[test]
    fn softmax_vjp_matches_direct_jacobian() {
        let p = arr2(&[[0.2, 0.3, 0.5]]);
        let g = arr2(&[[1.0, -1.0, 0.5]]);
        let dz = softmax_vjp(&p, &g);
        // J_ij = p_i (delta_ij - p_j); dz_j = sum_i g_i J_ij
        for j in 0..3 {
            let mut expect = 0.0;
            for i in 0..3 {
                let jac = p[[0, i]] * ((i == j) as usize as f64 - p[[0, j]]);
                expect += g[[0, i]] * jac;
            }
            assert!((dz[[0, j]] - expect).abs() < 1e-12);
        }
    }
}
