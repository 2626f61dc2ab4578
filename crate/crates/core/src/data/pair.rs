//! Two-domain pair construction: a disjoint split of one labeled base set with
//! a transform applied to each half, plus the plain-text manifest that makes
//! the construction reproducible from disk.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

use super::transform::DomainTransform;
use super::{load_idx, ImageSet};

/// Split `base` into two disjoint halves and apply one transform per half.
///
/// Both halves keep their labels; callers that must not see target labels go
/// through [`ImageSet::strip_labels`].
pub fn make_domain_pair(
    base: &ImageSet,
    source_t: &DomainTransform,
    target_t: &DomainTransform,
    split_seed: u64,
) -> Result<(ImageSet, ImageSet)> {
    if base.labels().is_none() {
        return Err(Error::UnlabeledData);
    }
    let n = base.n();
    if n < 2 {
        return Err(Error::EmptySplit { n });
    }
    let (source_idx, target_idx) = split_indices(n, split_seed);
    let source_half = gather_set(base, &source_idx);
    let target_half = gather_set(base, &target_idx);
    Ok((source_t.apply(&source_half)?, target_t.apply(&target_half)?))
}

/// Disjoint 50/50 index split (source gets floor(n/2)); deterministic in the seed.
pub fn split_indices(n: usize, split_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(split_seed);
    order.shuffle(&mut rng);
    let cut = n / 2;
    let target = order.split_off(cut);
    (order, target)
}

fn gather_set(base: &ImageSet, indices: &[usize]) -> ImageSet {
    let batch = base.gather(indices);
    ImageSet::new(batch.images, batch.labels.map(ndarray::Array1::from_vec))
        .expect("subset of a valid set is valid")
}

/// The four sets a pair manifest expands to.
pub struct DomainPair {
    pub source_train: ImageSet,
    pub target_train: ImageSet,
    pub source_test: ImageSet,
    pub target_test: ImageSet,
}

/// Plain-text key-value manifest describing a synthetic pair: base IDX paths
/// (relative to the manifest), per-half transforms, and the split seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PairManifest {
    pub base_train_images: PathBuf,
    pub base_train_labels: PathBuf,
    pub base_test_images: PathBuf,
    pub base_test_labels: PathBuf,
    pub source_transform: DomainTransform,
    pub target_transform: DomainTransform,
    pub split_seed: u64,
}

impl PairManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        text.push_str(&format!(
            "base_train_images = {}\n",
            self.base_train_images.display()
        ));
        text.push_str(&format!(
            "base_train_labels = {}\n",
            self.base_train_labels.display()
        ));
        text.push_str(&format!(
            "base_test_images = {}\n",
            self.base_test_images.display()
        ));
        text.push_str(&format!(
            "base_test_labels = {}\n",
            self.base_test_labels.display()
        ));
        text.push_str(&format!("source_transform = {}\n", self.source_transform));
        text.push_str(&format!("target_transform = {}\n", self.target_transform));
        text.push_str(&format!("split_seed = {}\n", self.split_seed));
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut fields = std::collections::HashMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::InvalidManifest {
                message: format!("line {}: expected `key = value`, got `{line}`", no + 1),
            })?;
            fields.insert(key.trim().to_string(), value.trim().to_string());
        }
        let mut take = |key: &str| {
            fields.remove(key).ok_or_else(|| Error::InvalidManifest {
                message: format!("missing key `{key}`"),
            })
        };
        let manifest = PairManifest {
            base_train_images: PathBuf::from(take("base_train_images")?),
            base_train_labels: PathBuf::from(take("base_train_labels")?),
            base_test_images: PathBuf::from(take("base_test_images")?),
            base_test_labels: PathBuf::from(take("base_test_labels")?),
            source_transform: take("source_transform")?.parse()?,
            target_transform: take("target_transform")?.parse()?,
            split_seed: take("split_seed")?
                .parse()
                .map_err(|e| Error::InvalidManifest {
                    message: format!("split_seed: {e}"),
                })?,
        };
        if let Some(key) = fields.keys().next() {
            return Err(Error::InvalidManifest {
                message: format!("unknown key `{key}`"),
            });
        }
        Ok(manifest)
    }

    /// Reconstruct the four sets. Relative paths resolve against the manifest
    /// directory. The test split derives its seed from `split_seed` so train
    /// and test shuffles stay independent.
    pub fn load_pair(&self, manifest_path: &Path) -> Result<DomainPair> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| {
            if p.is_absolute() {
                p.clone()
            } else {
                dir.join(p)
            }
        };
        let base_train = load_idx(
            &resolve(&self.base_train_images),
            Some(&resolve(&self.base_train_labels)),
        )?;
        let base_test = load_idx(
            &resolve(&self.base_test_images),
            Some(&resolve(&self.base_test_labels)),
        )?;
        let (source_train, target_train) = make_domain_pair(
            &base_train,
            &self.source_transform,
            &self.target_transform,
            self.split_seed,
        )?;
        let (source_test, target_test) = make_domain_pair(
            &base_test,
            &self.source_transform,
            &self.target_transform,
            test_split_seed(self.split_seed),
        )?;
        Ok(DomainPair {
            source_train,
            target_train,
            source_test,
            target_test,
        })
    }
}

fn test_split_seed(split_seed: u64) -> u64 {
    split_seed ^ 0x5851_f42d_4c95_7f2d
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array4};

    fn base(n: usize) -> ImageSet {
        let images = Array4::from_shape_fn((n, 1, 16, 16), |(i, _, y, x)| {
            (((i + y + x) % 200) as f32) / 127.5 - 1.0
        });
        let labels = Array1::from_vec((0..n).map(|i| (i % 10) as u8).collect());
        ImageSet::new(images, Some(labels)).unwrap()
    }

    #[test]
    fn split_is_disjoint_and_even() {
        let (s, t) = split_indices(1000, 42);
        assert_eq!(s.len(), 500);
        assert_eq!(t.len(), 500);
        let mut all: Vec<usize> = s.iter().chain(t.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_deterministic() {
        assert_eq!(split_indices(101, 7), split_indices(101, 7));
    }

    #[test]
    fn pair_requires_labels() {
        let unlabeled = ImageSet::new(Array4::zeros((4, 1, 16, 16)), None).unwrap();
        assert!(matches!(
            make_domain_pair(
                &unlabeled,
                &DomainTransform::Identity,
                &DomainTransform::Invert,
                0
            ),
            Err(Error::UnlabeledData)
        ));
    }

    #[test]
    fn tiny_base_is_rejected() {
        let one = base(1);
        assert!(matches!(
            make_domain_pair(&one, &DomainTransform::Identity, &DomainTransform::Invert, 0),
            Err(Error::EmptySplit { n: 1 })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::TempDir::new().unwrap();
        let m = PairManifest {
            base_train_images: "train-images.idx".into(),
            base_train_labels: "train-labels.idx".into(),
            base_test_images: "test-images.idx".into(),
            base_test_labels: "test-labels.idx".into(),
            source_transform: DomainTransform::Identity,
            target_transform: DomainTransform::Invert,
            split_seed: 99,
        };
        let path = dir.path().join("pair.manifest");
        m.save(&path).unwrap();
        assert_eq!(PairManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("pair.manifest");
        std::fs::write(
            &path,
            "base_train_images = a\nbase_train_labels = b\nbase_test_images = c\n\
             base_test_labels = d\nsource_transform = identity\ntarget_transform = invert\n\
             split_seed = 1\nmystery = 2\n",
        )
        .unwrap();
        assert!(matches!(
            PairManifest::load(&path),
            Err(Error::InvalidManifest { .. })
        ));
    }
}
