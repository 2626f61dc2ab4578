//! IDX file format: big-endian magic, big-endian u32 dims, raw u8 payload.
//!
//! Magic 0x00000803 marks a u8 image tensor with dims (N, H, W);
//! 0x00000801 marks a u8 label vector with dims (N,).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    r.read_u32::<BigEndian>().map_err(|_| Error::TruncatedFile {
        path: path.to_path_buf(),
    })
}

/// Read a u8 image tensor (N, H, W) from an IDX3 file.
pub fn read_idx_images(path: &Path) -> Result<Array3<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let magic = read_u32(&mut r, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: format!("{IMAGES_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let n = read_u32(&mut r, path)? as usize;
    let h = read_u32(&mut r, path)? as usize;
    let w = read_u32(&mut r, path)? as usize;
    let mut buf = vec![0u8; n * h * w];
    r.read_exact(&mut buf).map_err(|_| Error::TruncatedFile {
        path: path.to_path_buf(),
    })?;
    Array3::from_shape_vec((n, h, w), buf)
        .map_err(|e| Error::shape(format!("idx image payload: {e}")))
}

/// Read a u8 label vector from an IDX1 file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let magic = read_u32(&mut r, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: format!("{LABELS_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let n = read_u32(&mut r, path)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| Error::TruncatedFile {
        path: path.to_path_buf(),
    })?;
    Ok(buf)
}

pub fn write_idx_images(path: &Path, images: &Array3<u8>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (n, h, wd) = images.dim();
    w.write_u32::<BigEndian>(IMAGES_MAGIC)
        .and_then(|_| w.write_u32::<BigEndian>(n as u32))
        .and_then(|_| w.write_u32::<BigEndian>(h as u32))
        .and_then(|_| w.write_u32::<BigEndian>(wd as u32))
        .map_err(|e| Error::io(path, e))?;
    let contiguous = images.as_standard_layout();
    w.write_all(contiguous.as_slice().expect("standard layout"))
        .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_u32::<BigEndian>(LABELS_MAGIC)
        .and_then(|_| w.write_u32::<BigEndian>(labels.len() as u32))
        .map_err(|e| Error::io(path, e))?;
    w.write_all(labels).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Map a pixel byte to the normalized range: b/255 -> [0,1] -> [-1,1].
#[inline]
pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`]; exact for byte-derived values.
#[inline]
pub fn unit_to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}
