//! Datasets, domain transforms, synthetic pairs, and deterministic batching.

pub mod idx;
pub mod pair;
pub mod synth;
pub mod transform;

use std::path::Path;

use ndarray::{Array1, Array3, Array4, ArrayView4, Axis, s};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

pub use pair::{DomainPair, PairManifest};
pub use transform::DomainTransform;

/// A labeled (or unlabeled) stack of images, N x C x H x W, values in [-1, 1].
///
/// Immutable after construction; cheap to share by reference across threads.
#[derive(Debug, Clone)]
pub struct ImageSet {
    images: Array4<f32>,
    labels: Option<Array1<u8>>,
}

impl ImageSet {
    pub fn new(images: Array4<f32>, labels: Option<Array1<u8>>) -> Result<Self> {
        let (n, c, h, w) = images.dim();
        if let Some(ref l) = labels {
            if l.len() != n {
                return Err(Error::CountMismatch {
                    images: n,
                    labels: l.len(),
                });
            }
        }
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("channel count {c} not in {{1, 3}}")));
        }
        if h < 16 || w < 16 {
            return Err(Error::shape(format!("image size {h}x{w} below 16x16")));
        }
        if images.iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(Error::shape("pixel values outside [-1, 1]".to_string()));
        }
        Ok(ImageSet { images, labels })
    }

    /// Build a grayscale set from raw bytes, applying the fixed byte -> [-1,1] map.
    pub fn from_bytes(images: &Array3<u8>, labels: Option<Vec<u8>>) -> Result<Self> {
        let (n, h, w) = images.dim();
        let floats = images.mapv(idx::byte_to_unit);
        let images4 = floats
            .into_shape_with_order((n, 1, h, w))
            .expect("same element count");
        ImageSet::new(images4, labels.map(Array1::from_vec))
    }

    pub fn n(&self) -> usize {
        self.images.dim().0
    }

    pub fn channels(&self) -> usize {
        self.images.dim().1
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, _, h, w) = self.images.dim();
        (h, w)
    }

    pub fn images(&self) -> ArrayView4<'_, f32> {
        self.images.view()
    }

    pub fn labels(&self) -> Option<&Array1<u8>> {
        self.labels.as_ref()
    }

    /// Number of distinct classes implied by the labels (max + 1).
    pub fn num_classes(&self) -> Result<usize> {
        let labels = self.labels.as_ref().ok_or(Error::UnlabeledData)?;
        Ok(labels.iter().copied().max().map_or(0, |m| m as usize + 1))
    }

    /// Label-stripped view. Adaptation and SFIT entry points accept only this,
    /// so target labels cannot leak into training.
    pub fn strip_labels(&self) -> UnlabeledImages<'_> {
        UnlabeledImages {
            images: self.images.view(),
        }
    }

    /// Gather a batch by index.
    pub fn gather(&self, indices: &[usize]) -> ImageBatch {
        let images = self.images.select(Axis(0), indices);
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        ImageBatch { images, labels }
    }

    /// Deterministic mini-batches over the whole set.
    pub fn batches(&self, plan: &BatchPlan) -> Result<impl Iterator<Item = ImageBatch> + '_> {
        let index_lists = batch_indices(self.n(), plan)?;
        Ok(index_lists.into_iter().map(move |idx| self.gather(&idx)))
    }

    /// Serialize the pixel payload back to bytes (inverse of `from_bytes`).
    /// Only valid for single-channel sets.
    pub fn to_bytes(&self) -> Result<Array3<u8>> {
        let (n, c, h, w) = self.images.dim();
        if c != 1 {
            return Err(Error::shape(format!(
                "byte serialization requires 1 channel, found {c}"
            )));
        }
        let flat = self.images.slice(s![.., 0, .., ..]);
        Ok(Array3::from_shape_fn((n, h, w), |(i, y, x)| {
            idx::unit_to_byte(flat[[i, y, x]])
        }))
    }
}

/// Images-only view handed to stages that must never see labels.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledImages<'a> {
    images: ArrayView4<'a, f32>,
}

impl<'a> UnlabeledImages<'a> {
    pub fn from_array(images: ArrayView4<'a, f32>) -> Self {
        UnlabeledImages { images }
    }

    pub fn n(&self) -> usize {
        self.images.dim().0
    }

    pub fn images(&self) -> ArrayView4<'a, f32> {
        self.images
    }

    pub fn gather(&self, indices: &[usize]) -> Array4<f32> {
        self.images.select(Axis(0), indices)
    }

    pub fn batches(
        &self,
        plan: &BatchPlan,
    ) -> Result<impl Iterator<Item = Array4<f32>> + use<'a, '_>> {
        let index_lists = batch_indices(self.n(), plan)?;
        Ok(index_lists.into_iter().map(move |idx| self.gather(&idx)))
    }
}

/// One mini-batch of images with labels carried through when present.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub images: Array4<f32>,
    pub labels: Option<Vec<u8>>,
}

/// Deterministic batching plan: identical fields yield identical orderings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub drop_last: bool,
}

impl Default for BatchPlan {
    fn default() -> Self {
        BatchPlan {
            batch_size: 16,
            seed: 0,
            shuffle: true,
            drop_last: false,
        }
    }
}

/// The index lists backing [`ImageSet::batches`]; exposed so tests can record
/// and compare orderings directly.
pub fn batch_indices(n: usize, plan: &BatchPlan) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 || plan.batch_size > n {
        return Err(Error::BatchTooLarge {
            batch_size: plan.batch_size,
            n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    if plan.shuffle {
        let mut rng = ChaCha20Rng::seed_from_u64(plan.seed);
        order.shuffle(&mut rng);
    }
    let mut out = Vec::with_capacity(n / plan.batch_size + 1);
    for chunk in order.chunks(plan.batch_size) {
        if chunk.len() < plan.batch_size && plan.drop_last {
            break;
        }
        out.push(chunk.to_vec());
    }
    Ok(out)
}

/// Load an image set (and optional labels) from IDX files.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<ImageSet> {
    let images = idx::read_idx_images(images_path)?;
    let labels = match labels_path {
        Some(p) => {
            let l = idx::read_idx_labels(p)?;
            if l.len() != images.dim().0 {
                return Err(Error::CountMismatch {
                    images: images.dim().0,
                    labels: l.len(),
                });
            }
            Some(l)
        }
        None => None,
    };
    ImageSet::from_bytes(&images, labels)
}

/// Resize every image with bilinear interpolation (used to bring 16x16-style
/// sets up to the 28x28 the digit classifier expects).
pub fn resize_bilinear(set: &ImageSet, new_h: usize, new_w: usize) -> Result<ImageSet> {
    let (n, c, h, w) = set.images.dim();
    let src = &set.images;
    let mut out = Array4::<f32>::zeros((n, c, new_h, new_w));
    let sy = h as f32 / new_h as f32;
    let sx = w as f32 / new_w as f32;
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..new_h {
                // Align pixel centers between grids.
                let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let ty = fy - y0 as f32;
                for ox in 0..new_w {
                    let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let tx = fx - x0 as f32;
                    let v00 = src[[i, ch, y0, x0]];
                    let v01 = src[[i, ch, y0, x1]];
                    let v10 = src[[i, ch, y1, x0]];
                    let v11 = src[[i, ch, y1, x1]];
                    let top = v00 + (v01 - v00) * tx;
                    let bot = v10 + (v11 - v10) * tx;
                    out[[i, ch, oy, ox]] = (top + (bot - top) * ty).clamp(-1.0, 1.0);
                }
            }
        }
    }
    ImageSet::new(out, set.labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_set(n: usize) -> ImageSet {
        let images = Array4::from_shape_fn((n, 1, 16, 16), |(i, _, y, x)| {
            ((i * 37 + y * 3 + x) % 255) as f32 / 127.5 - 1.0
        });
        let labels = Array1::from_vec((0..n).map(|i| (i % 10) as u8).collect());
        ImageSet::new(images, Some(labels)).unwrap()
    }

    #[test]
    fn batch_arithmetic_with_drop_last() {
        let plan = BatchPlan {
            batch_size: 16,
            seed: 0,
            shuffle: true,
            drop_last: true,
        };
        let batches = batch_indices(100, &plan).unwrap();
        assert_eq!(batches.len(), 6);
        assert!(batches.iter().all(|b| b.len() == 16));
    }

    #[test]
    fn unshuffled_batches_are_in_index_order() {
        let plan = BatchPlan {
            batch_size: 4,
            seed: 9,
            shuffle: false,
            drop_last: false,
        };
        let batches = batch_indices(10, &plan).unwrap();
        assert_eq!(batches[0], vec![0, 1, 2, 3]);
        assert_eq!(batches[2], vec![8, 9]);
    }

    #[test]
    fn same_plan_gives_identical_index_logs() {
        let plan = BatchPlan {
            batch_size: 7,
            seed: 1234,
            shuffle: true,
            drop_last: false,
        };
        assert_eq!(batch_indices(50, &plan).unwrap(), batch_indices(50, &plan).unwrap());
    }

    #[test]
    fn batch_too_large_is_rejected() {
        let plan = BatchPlan {
            batch_size: 11,
            ..BatchPlan::default()
        };
        assert!(matches!(
            batch_indices(10, &plan),
            Err(Error::BatchTooLarge { .. })
        ));
    }

    #[test]
    fn epoch_covers_every_index_once() {
        let plan = BatchPlan {
            batch_size: 8,
            seed: 77,
            shuffle: true,
            drop_last: false,
        };
        let mut seen: Vec<usize> = batch_indices(45, &plan).unwrap().concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..45).collect::<Vec<_>>());
    }

    #[test]
    fn gather_carries_labels() {
        let set = toy_set(12);
        let batch = set.gather(&[3, 5]);
        assert_eq!(batch.images.dim(), (2, 1, 16, 16));
        assert_eq!(batch.labels.as_deref(), Some(&[3u8, 5][..]));
    }

    #[test]
    fn label_count_mismatch_rejected() {
        let images = Array4::zeros((4, 1, 16, 16));
        let labels = Array1::from_vec(vec![0u8; 3]);
        assert!(matches!(
            ImageSet::new(images, Some(labels)),
            Err(Error::CountMismatch { .. })
        ));
    }

    #[test]
    fn resize_preserves_constant_images() {
        let images = Array4::from_elem((2, 1, 16, 16), 0.25f32);
        let set = ImageSet::new(images, None).unwrap();
        let resized = resize_bilinear(&set, 28, 28).unwrap();
        assert_eq!(resized.hw(), (28, 28));
        assert!(resized.images().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}
