//! PNG exports: image grids (rows of target / generated / source samples)
//! and Gram-difference heatmaps with sidecar min/max metadata.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView3, ArrayView4, Axis};

use crate::data::idx::unit_to_byte;
use crate::error::{Error, Result};
use crate::losses;

const SEPARATOR: u8 = 255;
const SEPARATOR_WIDTH: usize = 2;

/// Tile image rows into one grid: row-major tiles, 2-pixel separators on all
/// sides, [-1,1] mapped to [0,255], grayscale replicated to RGB.
pub fn render_grid(rows: &[ArrayView4<f32>]) -> Result<RgbImage> {
    if rows.is_empty() {
        return Err(Error::SizeMismatch {
            context: "no image rows".into(),
        });
    }
    let (n0, _, h, w) = rows[0].dim();
    for (i, row) in rows.iter().enumerate() {
        let (n, c, rh, rw) = row.dim();
        if n != n0 || rh != h || rw != w {
            return Err(Error::SizeMismatch {
                context: format!(
                    "row {i} is {n} images of {rh}x{rw}, expected {n0} of {h}x{w}"
                ),
            });
        }
        if c != 1 && c != 3 {
            return Err(Error::SizeMismatch {
                context: format!("row {i} has {c} channels"),
            });
        }
    }
    let r = rows.len();
    let out_h = r * h + (r + 1) * SEPARATOR_WIDTH;
    let out_w = n0 * w + (n0 + 1) * SEPARATOR_WIDTH;
    let mut img = RgbImage::from_pixel(out_w as u32, out_h as u32, Rgb([SEPARATOR; 3]));

    for (ri, row) in rows.iter().enumerate() {
        let c = row.dim().1;
        for ti in 0..n0 {
            let tile = row.index_axis(Axis(0), ti);
            let y0 = SEPARATOR_WIDTH + ri * (h + SEPARATOR_WIDTH);
            let x0 = SEPARATOR_WIDTH + ti * (w + SEPARATOR_WIDTH);
            for py in 0..h {
                for px in 0..w {
                    let rgb = if c == 1 {
                        let v = unit_to_byte(tile[[0, py, px]]);
                        [v, v, v]
                    } else {
                        [
                            unit_to_byte(tile[[0, py, px]]),
                            unit_to_byte(tile[[1, py, px]]),
                            unit_to_byte(tile[[2, py, px]]),
                        ]
                    };
                    img.put_pixel((x0 + px) as u32, (y0 + py) as u32, Rgb(rgb));
                }
            }
        }
    }
    Ok(img)
}

pub fn export_grid(rows: &[ArrayView4<f32>], path: &Path) -> Result<()> {
    let img = render_grid(rows)?;
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

/// |G_S - G_T| (optionally on row-normalized Grams) for one feature-map pair.
pub fn gram_diff_matrix(
    f_target: ArrayView3<f64>,
    f_source: ArrayView3<f64>,
    normalized: bool,
) -> Result<Array2<f64>> {
    if f_target.dim() != f_source.dim() {
        return Err(Error::shape(format!(
            "gram heatmap: {:?} vs {:?}",
            f_target.dim(),
            f_source.dim()
        )));
    }
    let gt = losses::gram(f_target);
    let gs = losses::gram(f_source);
    let (gt, gs) = if normalized {
        (losses::normalize_rows(&gt), losses::normalize_rows(&gs))
    } else {
        (gt, gs)
    };
    Ok((&gs - &gt).mapv(f64::abs))
}

/// Batch-mean |G_S - G_T| over paired feature-map batches.
pub fn mean_gram_diff(
    f_target: ArrayView4<f32>,
    f_source: ArrayView4<f32>,
    normalized: bool,
) -> Result<Array2<f64>> {
    if f_target.dim() != f_source.dim() {
        return Err(Error::shape(format!(
            "gram heatmap: {:?} vs {:?}",
            f_target.dim(),
            f_source.dim()
        )));
    }
    let b = f_target.dim().0;
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let d = f_target.dim().1;
    let mut acc = Array2::<f64>::zeros((d, d));
    for bi in 0..b {
        let ft = f_target.index_axis(Axis(0), bi).mapv(f64::from);
        let fs = f_source.index_axis(Axis(0), bi).mapv(f64::from);
        acc += &gram_diff_matrix(ft.view(), fs.view(), normalized)?;
    }
    Ok(acc / b as f64)
}

/// Monotone black -> red -> yellow -> white ramp; deeper color means a larger
/// difference.
fn heat_color(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let r = (3.0 * t).min(1.0);
    let g = (3.0 * t - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * t - 2.0).clamp(0.0, 1.0);
    Rgb([
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ])
}

/// Render a difference matrix at `zoom` pixels per cell, scaled by its max.
pub fn render_heatmap(diff: &Array2<f64>, zoom: usize) -> RgbImage {
    let (d0, d1) = diff.dim();
    let max = diff.iter().copied().fold(0.0f64, f64::max);
    let mut img = RgbImage::new((d1 * zoom) as u32, (d0 * zoom) as u32);
    for i in 0..d0 {
        for j in 0..d1 {
            let t = if max > 0.0 { diff[[i, j]] / max } else { 0.0 };
            let color = heat_color(t);
            for dy in 0..zoom {
                for dx in 0..zoom {
                    img.put_pixel((j * zoom + dx) as u32, (i * zoom + dy) as u32, color);
                }
            }
        }
    }
    img
}

/// Export the |G_S - G_T| heatmap of one feature-map pair and write min/max
/// caption metadata to `<path>.txt`.
pub fn export_gram_heatmap(
    f_target: ArrayView3<f64>,
    f_source: ArrayView3<f64>,
    normalized: bool,
    zoom: usize,
    path: &Path,
) -> Result<(f64, f64)> {
    let diff = gram_diff_matrix(f_target, f_source, normalized)?;
    write_heatmap(&diff, normalized, zoom, path)
}

/// Shared writer for single-pair and batch-mean heatmaps.
pub fn write_heatmap(
    diff: &Array2<f64>,
    normalized: bool,
    zoom: usize,
    path: &Path,
) -> Result<(f64, f64)> {
    let min = diff.iter().copied().fold(f64::INFINITY, f64::min);
    let max = diff.iter().copied().fold(0.0f64, f64::max);
    let img = render_heatmap(diff, zoom);
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })?;
    let sidecar = path.with_extension("png.txt");
    let text = format!(
        "kind = {}\nmin = {min}\nmax = {max}\ndims = {}x{}\nzoom = {zoom}\n",
        if normalized { "normalized" } else { "raw" },
        diff.dim().0,
        diff.dim().1,
    );
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
    Ok((min, max))
}
