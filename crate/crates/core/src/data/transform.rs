//! Domain transforms: deterministic per-image mappings that synthesize a
//! controllable gap between two halves of one base dataset.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

use super::ImageSet;

/// A pure, parameterized image transform. Identical (kind, params, input)
/// always produces bit-identical output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainTransform {
    Identity,
    /// v -> -v; exact on the [-1, 1] byte grid.
    Invert,
    /// Reorder the three channels.
    ChannelPermute { perm: [usize; 3] },
    /// Grayscale to RGB with per-image channel gains derived from the seed.
    Colorize { seed: u64 },
    /// Scale per-pixel distance from the channel mean.
    SaturationScale { factor: f32 },
    /// Add a constant and clamp back into [-1, 1].
    BackgroundShift { delta: f32 },
}

impl DomainTransform {
    pub fn kind(&self) -> &'static str {
        match self {
            DomainTransform::Identity => "identity",
            DomainTransform::Invert => "invert",
            DomainTransform::ChannelPermute { .. } => "channel-permute",
            DomainTransform::Colorize { .. } => "colorize",
            DomainTransform::SaturationScale { .. } => "saturation-scale",
            DomainTransform::BackgroundShift { .. } => "background-shift",
        }
    }

    /// Apply to every image; labels are carried through unchanged.
    pub fn apply(&self, set: &ImageSet) -> Result<ImageSet> {
        let (n, c, h, w) = set.images().dim();
        let out = match *self {
            DomainTransform::Identity => set.images().to_owned(),
            DomainTransform::Invert => set.images().mapv(|v| -v),
            DomainTransform::ChannelPermute { perm } => {
                if c != 3 {
                    return Err(Error::IncompatibleChannels {
                        kind: self.kind(),
                        channels: c,
                    });
                }
                let mut sorted = perm;
                sorted.sort_unstable();
                if sorted != [0, 1, 2] {
                    return Err(Error::InvalidManifest {
                        message: format!("channel-permute {perm:?} is not a permutation of 0,1,2"),
                    });
                }
                let src = set.images();
                let views: Vec<_> = perm
                    .iter()
                    .map(|&p| src.index_axis(Axis(1), p).insert_axis(Axis(1)))
                    .collect();
                ndarray::concatenate(Axis(1), &views).expect("matching dims")
            }
            DomainTransform::Colorize { seed } => {
                if c != 1 {
                    return Err(Error::IncompatibleChannels {
                        kind: self.kind(),
                        channels: c,
                    });
                }
                let src = set.images();
                let mut out = Array4::<f32>::zeros((n, 3, h, w));
                for i in 0..n {
                    let gains = colorize_gains(seed, i);
                    let gray = src.index_axis(Axis(0), i);
                    for ch in 0..3 {
                        for y in 0..h {
                            for x in 0..w {
                                let v01 = (gray[[0, y, x]] + 1.0) * 0.5;
                                out[[i, ch, y, x]] = (v01 * gains[ch]) * 2.0 - 1.0;
                            }
                        }
                    }
                }
                out
            }
            DomainTransform::SaturationScale { factor } => {
                if c != 3 {
                    return Err(Error::IncompatibleChannels {
                        kind: self.kind(),
                        channels: c,
                    });
                }
                let src = set.images();
                let mut out = src.to_owned();
                for i in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            let gray =
                                (src[[i, 0, y, x]] + src[[i, 1, y, x]] + src[[i, 2, y, x]]) / 3.0;
                            for ch in 0..3 {
                                let v = gray + factor * (src[[i, ch, y, x]] - gray);
                                out[[i, ch, y, x]] = v.clamp(-1.0, 1.0);
                            }
                        }
                    }
                }
                out
            }
            DomainTransform::BackgroundShift { delta } => {
                set.images().mapv(|v| (v + delta).clamp(-1.0, 1.0))
            }
        };
        ImageSet::new(out, set.labels().cloned())
    }
}

/// Per-image RGB gains in [0.25, 1.0], a pure function of (seed, index).
fn colorize_gains(seed: u64, index: usize) -> [f32; 3] {
    let mut rng =
        ChaCha20Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    [
        rng.random_range(0.25..=1.0),
        rng.random_range(0.25..=1.0),
        rng.random_range(0.25..=1.0),
    ]
}

impl fmt::Display for DomainTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainTransform::Identity => write!(f, "identity"),
            DomainTransform::Invert => write!(f, "invert"),
            DomainTransform::ChannelPermute { perm } => {
                write!(f, "channel-permute:{},{},{}", perm[0], perm[1], perm[2])
            }
            DomainTransform::Colorize { seed } => write!(f, "colorize:{seed}"),
            DomainTransform::SaturationScale { factor } => {
                write!(f, "saturation-scale:{factor}")
            }
            DomainTransform::BackgroundShift { delta } => write!(f, "background-shift:{delta}"),
        }
    }
}

impl FromStr for DomainTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidManifest { message: msg };
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        match (kind, arg) {
            ("identity", None) => Ok(DomainTransform::Identity),
            ("invert", None) => Ok(DomainTransform::Invert),
            ("channel-permute", Some(a)) => {
                let parts: Vec<usize> = a
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(format!("channel-permute `{a}`: {e}")))?;
                if parts.len() != 3 {
                    return Err(bad(format!("channel-permute `{a}`: need 3 indices")));
                }
                Ok(DomainTransform::ChannelPermute {
                    perm: [parts[0], parts[1], parts[2]],
                })
            }
            ("colorize", Some(a)) => Ok(DomainTransform::Colorize {
                seed: a.parse().map_err(|e| bad(format!("colorize `{a}`: {e}")))?,
            }),
            ("saturation-scale", Some(a)) => Ok(DomainTransform::SaturationScale {
                factor: a
                    .parse()
                    .map_err(|e| bad(format!("saturation-scale `{a}`: {e}")))?,
            }),
            ("background-shift", Some(a)) => Ok(DomainTransform::BackgroundShift {
                delta: a
                    .parse()
                    .map_err(|e| bad(format!("background-shift `{a}`: {e}")))?,
            }),
            _ => Err(bad(format!("unknown transform spec `{s}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array4};

    fn gray_set(n: usize) -> ImageSet {
        let images = Array4::from_shape_fn((n, 1, 16, 16), |(i, _, y, x)| {
            (((i * 61 + y * 17 + x * 5) % 255) as f32) / 127.5 - 1.0
        });
        let labels = Array1::from_vec((0..n).map(|i| (i % 10) as u8).collect());
        ImageSet::new(images, Some(labels)).unwrap()
    }

    #[test]
    fn invert_negates_every_pixel() {
        let set = gray_set(3);
        let inv = DomainTransform::Invert.apply(&set).unwrap();
        for (a, b) in set.images().iter().zip(inv.images().iter()) {
            assert_eq!(*b, -*a);
        }
    }

    #[test]
    fn identity_is_bit_identical() {
        let set = gray_set(3);
        let out = DomainTransform::Identity.apply(&set).unwrap();
        assert_eq!(set.images(), out.images());
        assert_eq!(set.labels(), out.labels());
    }

    #[test]
    fn colorize_is_deterministic() {
        let set = gray_set(5);
        let t = DomainTransform::Colorize { seed: 7 };
        let a = t.apply(&set).unwrap();
        let b = t.apply(&set).unwrap();
        assert_eq!(a.images(), b.images());
        assert_eq!(a.channels(), 3);
    }

    #[test]
    fn channel_permute_requires_rgb() {
        let set = gray_set(2);
        let t = DomainTransform::ChannelPermute { perm: [2, 0, 1] };
        assert!(matches!(
            t.apply(&set),
            Err(Error::IncompatibleChannels { .. })
        ));
    }

    #[test]
    fn permute_then_inverse_restores() {
        let rgb = DomainTransform::Colorize { seed: 3 }
            .apply(&gray_set(2))
            .unwrap();
        let fwd = DomainTransform::ChannelPermute { perm: [2, 0, 1] }
            .apply(&rgb)
            .unwrap();
        let back = DomainTransform::ChannelPermute { perm: [1, 2, 0] }
            .apply(&fwd)
            .unwrap();
        assert_eq!(rgb.images(), back.images());
    }

    #[test]
    fn spec_strings_round_trip() {
        let cases = [
            DomainTransform::Identity,
            DomainTransform::Invert,
            DomainTransform::ChannelPermute { perm: [2, 0, 1] },
            DomainTransform::Colorize { seed: 7 },
            DomainTransform::SaturationScale { factor: 0.5 },
            DomainTransform::BackgroundShift { delta: 0.25 },
        ];
        for t in cases {
            let s = t.to_string();
            assert_eq!(s.parse::<DomainTransform>().unwrap(), t, "spec `{s}`");
        }
    }
}
