//! Model checkpoint container.
//!
//! Binary layout, little-endian throughout: magic `SFITCKPT` (8 bytes),
//! u32 version (= 1), u32 tensor count, then per tensor: u16 name length,
//! UTF-8 name, u8 ndim, ndim x u32 dims, row-major f32 payload.
//! Entry order is preserved, so save -> load -> save is byte-identical.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SFITCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, ArrayD<f32>)>) -> Self {
        Checkpoint { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Write atomically: serialize to a sibling temp file, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".into())
        ));
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            self.write_to(&mut w).map_err(|e| Error::io(&tmp, e))?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, tensor) in &self.tensors {
            let bytes = name.as_bytes();
            w.write_u16::<LittleEndian>(bytes.len() as u16)?;
            w.write_all(bytes)?;
            w.write_u8(tensor.ndim() as u8)?;
            for &d in tensor.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            let contiguous = tensor.as_standard_layout();
            for &v in contiguous.as_slice().expect("standard layout") {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let truncated = || Error::TruncatedFile {
            path: path.to_path_buf(),
        };

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| truncated())?;
        if &magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: format!("{magic:02x?}"),
            });
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| truncated())?;
        if version != VERSION {
            return Err(Error::VersionUnsupported { found: version });
        }
        let count = r.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>().map_err(|_| truncated())? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(|_| truncated())?;
            let name = String::from_utf8(name_bytes).map_err(|_| Error::InvalidManifest {
                message: "checkpoint tensor name is not UTF-8".into(),
            })?;
            let ndim = r.read_u8().map_err(|_| truncated())? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize);
            }
            let numel: usize = dims.iter().product();
            let mut data = vec![0f32; numel];
            for v in data.iter_mut() {
                *v = r.read_f32::<LittleEndian>().map_err(|_| truncated())?;
            }
            let tensor = ArrayD::from_shape_vec(dims, data)
                .map_err(|e| Error::shape(format!("checkpoint tensor `{name}`: {e}")))?;
            tensors.push((name, tensor));
        }
        Ok(Checkpoint { tensors })
    }

    /// SHA-256 over names, dims, and raw little-endian payloads, in entry
    /// order. Used for frozen-model verification.
    pub fn state_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.tensors {
            hasher.update(name.as_bytes());
            for &d in tensor.shape() {
                hasher.update(d.to_le_bytes());
            }
            let contiguous = tensor.as_standard_layout();
            for &v in contiguous.as_slice().expect("standard layout") {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// Pull tensors out of a checkpoint by exact name, erroring on both missing
/// and leftover entries so silent mismatches cannot happen.
pub struct TensorTaker {
    remaining: Vec<(String, ArrayD<f32>)>,
}

impl TensorTaker {
    pub fn new(ck: Checkpoint) -> Self {
        TensorTaker {
            remaining: ck.tensors,
        }
    }

    pub fn take(&mut self, name: &str) -> Result<ArrayD<f32>> {
        match self.remaining.iter().position(|(n, _)| n == name) {
            Some(i) => Ok(self.remaining.remove(i).1),
            None => Err(Error::MissingTensor { name: name.into() }),
        }
    }

    pub fn take_dim<D: ndarray::Dimension>(&mut self, name: &str) -> Result<ndarray::Array<f32, D>> {
        let t = self.take(name)?;
        let shape = t.shape().to_vec();
        t.into_dimensionality::<D>().map_err(|_| {
            Error::shape(format!("tensor `{name}`: unexpected rank for shape {shape:?}"))
        })
    }

    pub fn finish(self) -> Result<()> {
        match self.remaining.into_iter().next() {
            Some((name, _)) => Err(Error::UnknownTensor { name }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use tempfile::TempDir;

    fn sample() -> Checkpoint {
        Checkpoint::new(vec![
            ("a.weight".into(), arr2(&[[1.0f32, -2.5], [0.0, 3.25]]).into_dyn()),
            ("a.bias".into(), arr1(&[0.5f32, f32::MIN_POSITIVE]).into_dyn()),
        ])
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = TempDir::new().unwrap();
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        let ck = sample();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(ck, loaded);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("bad.ckpt");
        sample().save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("short.ckpt");
        sample().save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("v9.ckpt");
        sample().save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 9;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(Error::VersionUnsupported { found: 9 })
        ));
    }

    #[test]
    fn taker_flags_missing_and_unknown() {
        let mut taker = TensorTaker::new(sample());
        assert!(matches!(
            taker.take("nope"),
            Err(Error::MissingTensor { .. })
        ));
        let _ = taker.take("a.weight").unwrap();
        assert!(matches!(taker.finish(), Err(Error::UnknownTensor { .. })));
    }

    #[test]
    fn hash_changes_with_content() {
        let a = sample();
        let mut b = sample();
        b.tensors[0].1[[0, 0]] = 42.0;
        assert_ne!(a.state_hash(), b.state_hash());
    }
}
