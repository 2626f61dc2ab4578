//! 2-D convolution via im2col + sgemm, with zero or reflection padding.

use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array4, ArrayView3, ArrayView4, Axis};

use super::PAR_CHUNK;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array4<f32>, // (c_out, c_in, kh, kw)
    pub bias: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

/// Cached forward inputs; the column matrix is rebuilt in backward.
pub struct ConvCache {
    input: Array4<f32>,
}

pub struct ConvGrads {
    pub d_weight: Array4<f32>,
    pub d_bias: Array1<f32>,
}

impl Conv2d {
    pub fn new(
        weight: Array4<f32>,
        bias: Array1<f32>,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    ) -> Self {
        assert_eq!(weight.dim().0, bias.len());
        Conv2d {
            weight,
            bias,
            stride,
            pad,
            pad_mode,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, ConvCache) {
        let (b, c_in, h, w) = x.dim();
        let (c_out, wc_in, kh, kw) = self.weight.dim();
        assert_eq!(c_in, wc_in, "conv input channels");
        if self.pad_mode == PadMode::Reflect {
            assert!(self.pad < h && self.pad < w, "reflection pad needs pad < dim");
        }
        let (oh, ow) = self.out_hw(h, w);
        let p = oh * ow;
        let k = c_in * kh * kw;
        let map = build_index_map(h, w, oh, ow, kh, kw, self.stride, self.pad, self.pad_mode);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((c_out, k))
            .expect("contiguous weight");

        let mut out = Array4::<f32>::zeros((b, c_out, oh, ow));
        out.axis_chunks_iter_mut(Axis(0), PAR_CHUNK)
            .into_par_iter()
            .zip(x.axis_chunks_iter(Axis(0), PAR_CHUNK).into_par_iter())
            .for_each(|(mut out_chunk, x_chunk)| {
                let bc = x_chunk.dim().0;
                let col = im2col(&x_chunk, &map, k, p, kh * kw);
                let y = w_mat.dot(&col); // (c_out, bc*p)
                for bi in 0..bc {
                    let y_img = y.slice(s![.., bi * p..(bi + 1) * p]);
                    let mut dst = out_chunk.index_axis_mut(Axis(0), bi);
                    for co in 0..c_out {
                        let bias = self.bias[co];
                        let src = y_img.row(co);
                        let mut plane = dst.index_axis_mut(Axis(0), co);
                        let flat = plane.as_slice_mut().expect("contiguous out");
                        for (d, &v) in flat.iter_mut().zip(src.iter()) {
                            *d = v + bias;
                        }
                    }
                }
            });
        (out, ConvCache { input: x.clone() })
    }

    /// Backward pass. Input and parameter gradients are each optional so
    /// frozen models can skip the weight-gradient gemms. Parameter gradients
    /// are summed over the batch in fixed chunk order.
    pub fn backward(
        &self,
        cache: &ConvCache,
        d_out: &Array4<f32>,
        want_dx: bool,
        want_dw: bool,
    ) -> (Option<Array4<f32>>, Option<ConvGrads>) {
        let x = &cache.input;
        let (b, c_in, h, w) = x.dim();
        let (c_out, _, kh, kw) = self.weight.dim();
        let (oh, ow) = self.out_hw(h, w);
        let p = oh * ow;
        let k = c_in * kh * kw;
        let map = build_index_map(h, w, oh, ow, kh, kw, self.stride, self.pad, self.pad_mode);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((c_out, k))
            .expect("contiguous weight");

        let mut dx = if want_dx {
            Some(Array4::<f32>::zeros((b, c_in, h, w)))
        } else {
            None
        };

        // Each chunk produces its own (dW, db); dx writes are disjoint.
        let chunk_grads: Vec<Option<(Array2<f32>, Array1<f32>)>> = match dx.as_mut() {
            Some(dx_arr) => dx_arr
                .axis_chunks_iter_mut(Axis(0), PAR_CHUNK)
                .into_par_iter()
                .zip(x.axis_chunks_iter(Axis(0), PAR_CHUNK).into_par_iter())
                .zip(d_out.axis_chunks_iter(Axis(0), PAR_CHUNK).into_par_iter())
                .map(|((mut dx_chunk, x_chunk), dy_chunk)| {
                    let bc = x_chunk.dim().0;
                    let col = im2col(&x_chunk, &map, k, p, kh * kw);
                    let dy_mat = fold_chunk(&dy_chunk, c_out, p);
                    let grads = want_dw.then(|| {
                        (dy_mat.dot(&col.t()), dy_mat.sum_axis(Axis(1)))
                    });
                    let dcol = w_mat.t().dot(&dy_mat); // (k, bc*p)
                    for bi in 0..bc {
                        let dcol_img = dcol.slice(s![.., bi * p..(bi + 1) * p]);
                        let mut dst = dx_chunk.index_axis_mut(Axis(0), bi);
                        col2im_add(&dcol_img, &map, kh * kw, &mut dst);
                    }
                    grads
                })
                .collect(),
            None => x
                .axis_chunks_iter(Axis(0), PAR_CHUNK)
                .into_par_iter()
                .zip(d_out.axis_chunks_iter(Axis(0), PAR_CHUNK).into_par_iter())
                .map(|(x_chunk, dy_chunk)| {
                    want_dw.then(|| {
                        let col = im2col(&x_chunk, &map, k, p, kh * kw);
                        let dy_mat = fold_chunk(&dy_chunk, c_out, p);
                        (dy_mat.dot(&col.t()), dy_mat.sum_axis(Axis(1)))
                    })
                })
                .collect(),
        };

        let grads = want_dw.then(|| {
            let mut d_weight = Array2::<f32>::zeros((c_out, k));
            let mut d_bias = Array1::<f32>::zeros(c_out);
            for pair in chunk_grads.into_iter().flatten() {
                d_weight += &pair.0;
                d_bias += &pair.1;
            }
            ConvGrads {
                d_weight: d_weight
                    .into_shape_with_order((c_out, c_in, kh, kw))
                    .expect("same count"),
                d_bias,
            }
        });
        (dx, grads)
    }
}

/// Source index for each (kernel offset, output position), or -1 for zero pad.
/// Shared by every channel and image of a given spatial shape.
fn build_index_map(
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Vec<i64> {
    let p = oh * ow;
    let mut map = vec![0i64; kh * kw * p];
    let reflect = |i: i64, n: usize| -> i64 {
        if i < 0 {
            -i
        } else if i >= n as i64 {
            2 * n as i64 - 2 - i
        } else {
            i
        }
    };
    for ki in 0..kh {
        for kj in 0..kw {
            let base = (ki * kw + kj) * p;
            for oy in 0..oh {
                for ox in 0..ow {
                    let iy = (oy * stride + ki) as i64 - pad as i64;
                    let ix = (ox * stride + kj) as i64 - pad as i64;
                    let idx = match mode {
                        PadMode::Zero => {
                            if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
                                -1
                            } else {
                                iy * w as i64 + ix
                            }
                        }
                        PadMode::Reflect => reflect(iy, h) * w as i64 + reflect(ix, w),
                    };
                    map[base + oy * ow + ox] = idx;
                }
            }
        }
    }
    map
}

/// Column matrix (k, bc*p) for a chunk of images.
fn im2col(x_chunk: &ArrayView4<f32>, map: &[i64], k: usize, p: usize, kk: usize) -> Array2<f32> {
    let (bc, c_in, _, _) = x_chunk.dim();
    let mut col = Array2::<f32>::zeros((k, bc * p));
    let col_slice = col.as_slice_mut().expect("contiguous col");
    let row_len = bc * p;
    for bi in 0..bc {
        let img = x_chunk.index_axis(Axis(0), bi);
        let img_slice = img.as_slice().expect("contiguous input");
        for c in 0..c_in {
            let plane = &img_slice[c * (img.dim().1 * img.dim().2)
                ..(c + 1) * (img.dim().1 * img.dim().2)];
            for off in 0..kk {
                let row = c * kk + off;
                let dst = &mut col_slice[row * row_len + bi * p..row * row_len + (bi + 1) * p];
                let src_map = &map[off * p..(off + 1) * p];
                for (d, &idx) in dst.iter_mut().zip(src_map.iter()) {
                    *d = if idx >= 0 { plane[idx as usize] } else { 0.0 };
                }
            }
        }
    }
    col
}

/// Scatter-add a per-image column gradient back onto the input plane.
fn col2im_add(
    dcol_img: &ndarray::ArrayView2<f32>,
    map: &[i64],
    kk: usize,
    dst: &mut ndarray::ArrayViewMut3<f32>,
) {
    let (c_in_kk, p) = dcol_img.dim();
    let c_in = c_in_kk / kk;
    let plane_len = dst.dim().1 * dst.dim().2;
    let dst_slice = dst.as_slice_mut().expect("contiguous dx");
    for c in 0..c_in {
        let plane = &mut dst_slice[c * plane_len..(c + 1) * plane_len];
        for off in 0..kk {
            let row = dcol_img.row(c * kk + off);
            let src_map = &map[off * p..(off + 1) * p];
            for (&g, &idx) in row.iter().zip(src_map.iter()) {
                if idx >= 0 {
                    plane[idx as usize] += g;
                }
            }
        }
    }
}

/// View a (bc, c_out, oh, ow) gradient chunk as (c_out, bc*p).
fn fold_chunk(dy_chunk: &ArrayView4<f32>, c_out: usize, p: usize) -> Array2<f32> {
    let bc = dy_chunk.dim().0;
    let mut out = Array2::<f32>::zeros((c_out, bc * p));
    for bi in 0..bc {
        let img: ArrayView3<f32> = dy_chunk.index_axis(Axis(0), bi);
        let flat = img
            .into_shape_with_order((c_out, p))
            .expect("contiguous dy");
        out.slice_mut(s![.., bi * p..(bi + 1) * p]).assign(&flat);
    }
    out
}
