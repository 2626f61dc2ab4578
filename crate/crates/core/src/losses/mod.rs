//! Loss terms for generator training, adaptation, and fine-tuning, each as a
//! pure function returning the scalar and (where training needs it) the
//! analytic gradient with respect to the branch being optimized.
//!
//! Everything here runs in f64; the f32 training pipelines convert feature
//! maps and probability rows at this boundary.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp guard for row normalization and log arguments.
pub const EPS: f64 = 1e-8;

/// Weights of the overall generator-training objective. Defaults match the
/// two-term objective: KD and RP at 1, everything else off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_kd: f64,
    pub w_rp: f64,
    pub w_style: f64,
    pub w_batch: f64,
    pub w_pixel: f64,
    pub w_bn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_kd: 1.0,
            w_rp: 1.0,
            w_style: 0.0,
            w_batch: 0.0,
            w_pixel: 0.0,
            w_bn: 0.0,
        }
    }
}

/// Per-term values entering [`total_sfit_loss`]. Absent terms stay 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub kd: f64,
    pub rp: f64,
    pub style: f64,
    pub batch: f64,
    pub pixel: f64,
    pub bn: f64,
}

/// Weighted sum of the loss terms; with default weights this is KD + RP.
pub fn total_sfit_loss(weights: &LossWeights, terms: &LossTerms) -> f64 {
    weights.w_kd * terms.kd
        + weights.w_rp * terms.rp
        + weights.w_style * terms.style
        + weights.w_batch * terms.batch
        + weights.w_pixel * terms.pixel
        + weights.w_bn * terms.bn
}

fn check_same_shape<D: ndarray::Dimension>(a: &D, b: &D, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.slice(),
            b.slice()
        )));
    }
    Ok(())
}

fn check_rows_are_distributions(p: &ArrayView2<f64>) -> Result<()> {
    for (i, row) in p.axis_iter(Axis(0)).enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::NonDistribution { row: i, sum });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// knowledge distillation
// ---------------------------------------------------------------------------

/// Batch-mean KL(p_target || p_source). The target rows are treated as
/// constants; gradients flow to the source branch only. Convention 0 log 0 = 0.
pub fn kd_loss(p_target: ArrayView2<f64>, p_source: ArrayView2<f64>) -> Result<f64> {
    Ok(kd_loss_grad(p_target, p_source)?.0)
}

/// KD value plus gradient w.r.t. the source-branch probability rows.
pub fn kd_loss_grad(
    p_target: ArrayView2<f64>,
    p_source: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(&p_target.raw_dim(), &p_source.raw_dim(), "kd_loss")?;
    check_rows_are_distributions(&p_target)?;
    check_rows_are_distributions(&p_source)?;
    let b = p_target.dim().0 as f64;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(p_source.raw_dim());
    for ((bi, ci), &pt) in p_target.indexed_iter() {
        if pt > 0.0 {
            let ps = p_source[[bi, ci]];
            loss += pt * (pt.max(EPS).ln() - ps.max(EPS).ln());
            grad[[bi, ci]] = if ps > EPS { -pt / ps / b } else { 0.0 };
        }
    }
    Ok((loss / b, grad))
}

/// KD gradient routed through the source-branch softmax: d/dz = (p_s - p_t)/B.
pub fn kd_grad_wrt_logits(
    p_target: ArrayView2<f64>,
    p_source: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    let (loss, _) = kd_loss_grad(p_target, p_source)?;
    let b = p_target.dim().0 as f64;
    let grad = (&p_source.to_owned() - &p_target) / b;
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Gram machinery
// ---------------------------------------------------------------------------

/// Reshape a feature map (D, H, W) to its per-channel row matrix (D, H*W).
pub fn reshape_features(f: ArrayView3<f64>) -> Array2<f64> {
    let (d, h, w) = f.dim();
    f.to_owned()
        .into_shape_with_order((d, h * w))
        .expect("contiguous feature map")
}

/// Raw Gram matrix G = F F^T of one feature map; symmetric PSD by construction.
pub fn gram(f: ArrayView3<f64>) -> Array2<f64> {
    let fm = reshape_features(f);
    fm.dot(&fm.t())
}

/// Row-wise L2 normalization with the EPS guard on zero rows.
pub fn normalize_rows(g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(EPS);
        row.mapv_inplace(|v| v / denom);
    }
    out
}

/// Backprop through row normalization: given dL/d(row/max(|row|,eps)),
/// return dL/d(row).
fn normalize_rows_backward(g: &Array2<f64>, d_norm: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(g.raw_dim());
    for ((mut dst, row), d_row) in out
        .axis_iter_mut(Axis(0))
        .zip(g.axis_iter(Axis(0)))
        .zip(d_norm.axis_iter(Axis(0)))
    {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > EPS {
            let dot: f64 = row.iter().zip(d_row.iter()).map(|(&a, &b)| a * b).sum();
            let n3 = norm * norm * norm;
            for ((d, &g_v), &dn) in dst.iter_mut().zip(row.iter()).zip(d_row.iter()) {
                *d = dn / norm - g_v * dot / n3;
            }
        } else {
            for (d, &dn) in dst.iter_mut().zip(d_row.iter()) {
                *d = dn / EPS;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// relationship-preserving and style losses
// ---------------------------------------------------------------------------

/// Relationship-preserving loss of one image pair:
/// (1/D) * ||rownorm(G_S) - rownorm(G_T)||_F^2.
pub fn rp_loss(f_target: ArrayView3<f64>, f_source: ArrayView3<f64>) -> Result<f64> {
    Ok(rp_loss_grad(f_target, f_source)?.0)
}

/// RP value plus gradient w.r.t. the source-branch feature map.
pub fn rp_loss_grad(
    f_target: ArrayView3<f64>,
    f_source: ArrayView3<f64>,
) -> Result<(f64, Array3<f64>)> {
    check_same_shape(&f_target.raw_dim(), &f_source.raw_dim(), "rp_loss")?;
    let (d, h, w) = f_source.dim();
    let fs = reshape_features(f_source);
    let gt_norm = normalize_rows(&gram(f_target));
    let gs = fs.dot(&fs.t());
    let gs_norm = normalize_rows(&gs);
    let diff = &gs_norm - &gt_norm;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / d as f64;

    let d_gnorm = diff.mapv(|v| 2.0 * v / d as f64);
    let d_g = normalize_rows_backward(&gs, &d_gnorm);
    let d_fs = (&d_g + &d_g.t()).dot(&fs);
    let grad = d_fs
        .into_shape_with_order((d, h, w))
        .expect("same element count");
    Ok((loss, grad))
}

/// Batch-mean RP loss over (B, D, H, W) maps, gradient w.r.t. the source maps.
pub fn rp_loss_batch(
    f_target: ArrayView4<f64>,
    f_source: ArrayView4<f64>,
) -> Result<(f64, Array4<f64>)> {
    batch_mean(f_target, f_source, "rp_loss", rp_loss_grad)
}

/// Traditional style loss of one image pair: (1/D^2) * ||G_S - G_T||_F^2.
pub fn style_loss(f_target: ArrayView3<f64>, f_source: ArrayView3<f64>) -> Result<f64> {
    Ok(style_loss_grad(f_target, f_source)?.0)
}

pub fn style_loss_grad(
    f_target: ArrayView3<f64>,
    f_source: ArrayView3<f64>,
) -> Result<(f64, Array3<f64>)> {
    check_same_shape(&f_target.raw_dim(), &f_source.raw_dim(), "style_loss")?;
    let (d, h, w) = f_source.dim();
    let fs = reshape_features(f_source);
    let gt = gram(f_target);
    let gs = fs.dot(&fs.t());
    let diff = &gs - &gt;
    let d2 = (d * d) as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / d2;
    // diff is symmetric, so (dG + dG^T) F = 2 dG F
    let d_fs = diff.dot(&fs).mapv(|v| 4.0 * v / d2);
    let grad = d_fs
        .into_shape_with_order((d, h, w))
        .expect("same element count");
    Ok((loss, grad))
}

pub fn style_loss_batch(
    f_target: ArrayView4<f64>,
    f_source: ArrayView4<f64>,
) -> Result<(f64, Array4<f64>)> {
    batch_mean(f_target, f_source, "style_loss", style_loss_grad)
}

fn batch_mean(
    f_target: ArrayView4<f64>,
    f_source: ArrayView4<f64>,
    what: &str,
    per_image: impl Fn(ArrayView3<f64>, ArrayView3<f64>) -> Result<(f64, Array3<f64>)>,
) -> Result<(f64, Array4<f64>)> {
    check_same_shape(&f_target.raw_dim(), &f_source.raw_dim(), what)?;
    let b = f_target.dim().0;
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut loss = 0.0;
    let mut grad = Array4::<f64>::zeros(f_source.raw_dim());
    for bi in 0..b {
        let (l, g) = per_image(
            f_target.index_axis(Axis(0), bi),
            f_source.index_axis(Axis(0), bi),
        )?;
        loss += l;
        grad.index_axis_mut(Axis(0), bi)
            .assign(&g.mapv(|v| v / b as f64));
    }
    Ok((loss / b as f64, grad))
}

// ---------------------------------------------------------------------------
// transparent-filter initialization losses
// ---------------------------------------------------------------------------

/// Mean absolute pixel difference between generated and original images.
pub fn id_loss(generated: ArrayView4<f64>, original: ArrayView4<f64>) -> Result<f64> {
    Ok(id_loss_grad(generated, original)?.0)
}

pub fn id_loss_grad(
    generated: ArrayView4<f64>,
    original: ArrayView4<f64>,
) -> Result<(f64, Array4<f64>)> {
    check_same_shape(&generated.raw_dim(), &original.raw_dim(), "id_loss")?;
    let n = generated.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array4::<f64>::zeros(generated.raw_dim());
    ndarray::Zip::from(&mut grad)
        .and(&generated)
        .and(&original)
        .for_each(|g, &a, &b| {
            let d = a - b;
            loss += d.abs();
            *g = d.signum() / n;
        });
    Ok((loss / n, grad))
}

/// Mean squared feature difference: per sample ||v_gen - v_orig||^2 / D,
/// averaged over the batch. Gradient w.r.t. the generated-branch features.
pub fn content_loss(v_generated: ArrayView2<f64>, v_original: ArrayView2<f64>) -> Result<f64> {
    Ok(content_loss_grad(v_generated, v_original)?.0)
}

pub fn content_loss_grad(
    v_generated: ArrayView2<f64>,
    v_original: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(&v_generated.raw_dim(), &v_original.raw_dim(), "content_loss")?;
    let (b, d) = v_generated.dim();
    let scale = (b * d) as f64;
    let diff = &v_generated.to_owned() - &v_original;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / scale;
    let grad = diff.mapv(|v| 2.0 * v / scale);
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// fine-tuning losses
// ---------------------------------------------------------------------------

/// Negative entropy of the batch-mean prediction: -H(mean_b p_b).
/// Bounded in [-ln C, 0]; minimized by a uniform mean prediction.
pub fn diversity_loss(probs: ArrayView2<f64>) -> Result<f64> {
    Ok(diversity_loss_grad(probs)?.0)
}

pub fn diversity_loss_grad(probs: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let (b, _c) = probs.dim();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    check_rows_are_distributions(&probs)?;
    let mean = probs.mean_axis(Axis(0)).expect("non-empty batch");
    // L = sum_c m ln m  (negative entropy), with the EPS clamp inside the log
    let mut loss = 0.0;
    let mut d_mean = Array1::<f64>::zeros(mean.len());
    for (ci, &m) in mean.iter().enumerate() {
        if m > 0.0 {
            loss += m * m.max(EPS).ln();
        }
        d_mean[ci] = if m > EPS { m.ln() + 1.0 } else { EPS.ln() };
    }
    let mut grad = Array2::<f64>::zeros(probs.raw_dim());
    for mut row in grad.axis_iter_mut(Axis(0)) {
        row.assign(&d_mean.mapv(|v| v / b as f64));
    }
    Ok((loss, grad))
}

/// Batch-mean per-sample entropy H(p_b); the confidence half of the
/// information-maximization adaptation objective.
pub fn mean_entropy_grad(probs: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let (b, _) = probs.dim();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    check_rows_are_distributions(&probs)?;
    let bf = b as f64;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(probs.raw_dim());
    for ((bi, ci), &p) in probs.indexed_iter() {
        if p > 0.0 {
            loss -= p * p.max(EPS).ln();
        }
        grad[[bi, ci]] = if p > EPS {
            -(p.ln() + 1.0) / bf
        } else {
            -EPS.ln() / bf
        };
    }
    Ok((loss / bf, grad))
}

/// Agreement-gated pseudo-label cross entropy for one sample:
/// -ln p[y] when both branches predict the same class y, else exactly 0.
pub fn pseudo_label_loss(p_target_row: ArrayView1<f64>, y_s: usize, y_t: usize) -> Result<f64> {
    let c = p_target_row.len();
    if y_s >= c {
        return Err(Error::IndexOutOfRange { index: y_s, len: c });
    }
    if y_t >= c {
        return Err(Error::IndexOutOfRange { index: y_t, len: c });
    }
    if y_s != y_t {
        return Ok(0.0);
    }
    Ok(-p_target_row[y_s].max(EPS).ln())
}

/// Batch pseudo-label loss: mean of the per-sample terms over agreeing
/// samples (0 when none agree). Also returns the agreement count and the
/// gradient w.r.t. the target-branch probability rows.
pub fn pseudo_label_loss_batch(
    p_target: ArrayView2<f64>,
    y_source: &[usize],
    y_target: &[usize],
) -> Result<(f64, usize, Array2<f64>)> {
    let (b, c) = p_target.dim();
    if y_source.len() != b || y_target.len() != b {
        return Err(Error::shape(format!(
            "pseudo_label_loss: {b} rows vs {} / {} labels",
            y_source.len(),
            y_target.len()
        )));
    }
    let agree: Vec<usize> = (0..b).filter(|&i| y_source[i] == y_target[i]).collect();
    let mut grad = Array2::<f64>::zeros((b, c));
    if agree.is_empty() {
        return Ok((0.0, 0, grad));
    }
    let n = agree.len() as f64;
    let mut loss = 0.0;
    for &bi in &agree {
        loss += pseudo_label_loss(p_target.index_axis(Axis(0), bi), y_source[bi], y_target[bi])?;
        let p = p_target[[bi, y_source[bi]]];
        grad[[bi, y_source[bi]]] = if p > EPS { -1.0 / (p * n) } else { 0.0 };
    }
    Ok((loss / n, agree.len(), grad))
}

// ---------------------------------------------------------------------------
// batch- and pixel-wise similarity variants
// ---------------------------------------------------------------------------

/// Batch-wise similarity: Gram over the batch dimension of spatially pooled
/// features (B x B), row-normalized, MSE scaled by 1/B.
pub fn batch_similarity_loss(
    f_target: ArrayView4<f64>,
    f_source: ArrayView4<f64>,
) -> Result<f64> {
    Ok(batch_similarity_loss_grad(f_target, f_source)?.0)
}

pub fn batch_similarity_loss_grad(
    f_target: ArrayView4<f64>,
    f_source: ArrayView4<f64>,
) -> Result<(f64, Array4<f64>)> {
    check_same_shape(&f_target.raw_dim(), &f_source.raw_dim(), "batch_similarity")?;
    let (b, d, h, w) = f_source.dim();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let p = (h * w) as f64;
    let pool = |f: &ArrayView4<f64>| -> Array2<f64> {
        let mut a = Array2::<f64>::zeros((b, d));
        for bi in 0..b {
            for di in 0..d {
                a[[bi, di]] = f.slice(s![bi, di, .., ..]).sum() / p;
            }
        }
        a
    };
    let a_t = pool(&f_target);
    let a_s = pool(&f_source);
    let g_t = normalize_rows(&a_t.dot(&a_t.t()));
    let g_s_raw = a_s.dot(&a_s.t());
    let g_s = normalize_rows(&g_s_raw);
    let diff = &g_s - &g_t;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / b as f64;

    let d_gnorm = diff.mapv(|v| 2.0 * v / b as f64);
    let d_g = normalize_rows_backward(&g_s_raw, &d_gnorm);
    let d_a = (&d_g + &d_g.t()).dot(&a_s);
    let mut grad = Array4::<f64>::zeros(f_source.raw_dim());
    for bi in 0..b {
        for di in 0..d {
            grad.slice_mut(s![bi, di, .., ..]).fill(d_a[[bi, di]] / p);
        }
    }
    Ok((loss, grad))
}

/// Pixel-wise similarity: per image, Gram over spatial positions
/// ((H*W) x (H*W)), row-normalized, MSE scaled by 1/(H*W), batch-mean.
pub fn pixel_similarity_loss(
    f_target: ArrayView4<f64>,
    f_source: ArrayView4<f64>,
) -> Result<f64> {
    Ok(pixel_similarity_loss_grad(f_target, f_source)?.0)
}

pub fn pixel_similarity_loss_grad(
    f_target: ArrayView4<f64>,
    f_source: ArrayView4<f64>,
) -> Result<(f64, Array4<f64>)> {
    batch_mean(f_target, f_source, "pixel_similarity", |ft, fs| {
        let (d, h, w) = fs.dim();
        let p = h * w;
        let fm_t = reshape_features(ft);
        let fm_s = reshape_features(fs);
        let g_t = normalize_rows(&fm_t.t().dot(&fm_t));
        let g_s_raw = fm_s.t().dot(&fm_s);
        let g_s = normalize_rows(&g_s_raw);
        let diff = &g_s - &g_t;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / p as f64;

        let d_gnorm = diff.mapv(|v| 2.0 * v / p as f64);
        let d_g = normalize_rows_backward(&g_s_raw, &d_gnorm);
        let d_fs = fm_s.dot(&(&d_g + &d_g.t()));
        let grad = d_fs
            .into_shape_with_order((d, h, w))
            .expect("same element count");
        Ok((loss, grad))
    })
}

// ---------------------------------------------------------------------------
// BN-statistics alignment
// ---------------------------------------------------------------------------

/// Sum over BN layers of ||mu_batch - mu_running||^2 + ||var_batch - var_running||^2.
pub fn bn_stats_loss(
    batch_stats: &[(Array1<f64>, Array1<f64>)],
    running_stats: &[(Array1<f64>, Array1<f64>)],
) -> Result<f64> {
    Ok(bn_stats_loss_grad(batch_stats, running_stats)?.0)
}

/// Value plus per-layer gradients (d_mean, d_var) w.r.t. the batch statistics.
#[allow(clippy::type_complexity)]
pub fn bn_stats_loss_grad(
    batch_stats: &[(Array1<f64>, Array1<f64>)],
    running_stats: &[(Array1<f64>, Array1<f64>)],
) -> Result<(f64, Vec<(Array1<f64>, Array1<f64>)>)> {
    if batch_stats.len() != running_stats.len() {
        return Err(Error::LayerCountMismatch {
            expected: running_stats.len(),
            found: batch_stats.len(),
        });
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch_stats.len());
    for ((bm, bv), (rm, rv)) in batch_stats.iter().zip(running_stats.iter()) {
        if bm.len() != rm.len() || bv.len() != rv.len() {
            return Err(Error::shape(format!(
                "bn_stats_loss: layer widths {} / {} vs {} / {}",
                bm.len(),
                bv.len(),
                rm.len(),
                rv.len()
            )));
        }
        let dm = bm - rm;
        let dv = bv - rv;
        loss += dm.iter().map(|v| v * v).sum::<f64>() + dv.iter().map(|v| v * v).sum::<f64>();
        grads.push((dm.mapv(|v| 2.0 * v), dv.mapv(|v| 2.0 * v)));
    }
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// MMD (second-order polynomial kernel)
// ---------------------------------------------------------------------------

/// Brute-force MMD with kernel k(u, v) = (u^T v)^2 over per-position channel
/// vectors. Double-precision oracle: D^2 * style_loss equals this exactly in
/// exact arithmetic.
pub fn mmd_poly2_oracle(f_a: ArrayView3<f64>, f_b: ArrayView3<f64>) -> Result<f64> {
    check_same_shape(&f_a.raw_dim(), &f_b.raw_dim(), "mmd_poly2_oracle")?;
    let fa = reshape_features(f_a);
    let fb = reshape_features(f_b);
    let p = fa.dim().1;
    let k = |m1: &Array2<f64>, i: usize, m2: &Array2<f64>, j: usize| -> f64 {
        let dot: f64 = m1
            .column(i)
            .iter()
            .zip(m2.column(j).iter())
            .map(|(&a, &b)| a * b)
            .sum();
        dot * dot
    };
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..p {
            total += k(&fa, i, &fa, j) - 2.0 * k(&fa, i, &fb, j) + k(&fb, i, &fb, j);
        }
    }
    Ok(total)
}

/// Biased mean-form MMD^2 between two pooled-feature matrices (rows are
/// samples), with the same second-order polynomial kernel applied to
/// D-scaled features so magnitudes stay comparable across widths.
/// Returns the value and gradients w.r.t. both inputs.
pub fn mmd_poly2_mean_grad(
    u: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (n, d) = u.dim();
    let (m, dv) = v.dim();
    if d != dv {
        return Err(Error::shape(format!("mmd features: {d} vs {dv}")));
    }
    if n == 0 || m == 0 {
        return Err(Error::EmptyBatch);
    }
    let scale = 1.0 / d as f64;
    let us = u.mapv(|x| x * scale);
    let vs = v.mapv(|x| x * scale);
    // second-moment form: MMD^2 = ||Cu - Cv||_F^2 with C = (1/n) sum x x^T
    let cu = us.t().dot(&us) / n as f64;
    let cv = vs.t().dot(&vs) / m as f64;
    let diff = &cu - &cv;
    let loss = diff.iter().map(|x| x * x).sum::<f64>();
    // dL/dus = 4/n * us . diff ; dL/dvs = -4/m * vs . diff
    let du = us.dot(&diff).mapv(|x| 4.0 * x / n as f64) * scale;
    let dv_ = vs.dot(&diff).mapv(|x| -4.0 * x / m as f64) * scale;
    Ok((loss, du, dv_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, arr3};

    const TOL: f64 = 1e-6;

    fn fmap(rows: &Array2<f64>) -> Array3<f64> {
        // interpret a (D, P) matrix as a (D, 1, P) feature map
        let (d, p) = rows.dim();
        rows.clone()
            .into_shape_with_order((d, 1, p))
            .expect("same count")
    }

    #[test]
    fn kd_matches_hand_values() {
        let half = arr2(&[[0.5, 0.5]]);
        assert!(kd_loss(half.view(), half.view()).unwrap().abs() < TOL);

        let pt = arr2(&[[1.0, 0.0]]);
        let ps = arr2(&[[0.5, 0.5]]);
        let v = kd_loss(pt.view(), ps.view()).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < TOL);

        let u = arr2(&[[0.25, 0.25, 0.25, 0.25]]);
        assert!(kd_loss(u.view(), u.view()).unwrap().abs() < TOL);
    }

    #[test]
    fn kd_rejects_non_distributions() {
        let pt = arr2(&[[0.5, 0.5]]);
        let bad = arr2(&[[0.7, 0.5]]);
        assert!(matches!(
            kd_loss(pt.view(), bad.view()),
            Err(Error::NonDistribution { .. })
        ));
    }

    #[test]
    fn gram_hand_values() {
        let id = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(gram(fmap(&id).view()), id);

        let f = arr2(&[[1.0, 1.0], [1.0, -1.0]]);
        let g = gram(fmap(&f).view());
        assert_eq!(g, arr2(&[[2.0, 0.0], [0.0, 2.0]]));
    }

    #[test]
    fn normalize_rows_hand_values() {
        let g = arr2(&[[2.0, 0.0], [0.0, 0.0]]);
        let n = normalize_rows(&g);
        assert_eq!(n.row(0).to_owned(), arr1(&[1.0, 0.0]));
        assert_eq!(n.row(1).to_owned(), arr1(&[0.0, 0.0]));
        let d = normalize_rows(&arr2(&[[2.0, 0.0], [0.0, 2.0]]));
        assert_eq!(d, arr2(&[[1.0, 0.0], [0.0, 1.0]]));
    }

    #[test]
    fn rp_loss_examples() {
        let ft = fmap(&arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        assert!(rp_loss(ft.view(), ft.view()).unwrap().abs() < TOL);

        // raw Grams differ (I vs 2I) but normalized Grams are both I
        let fs = fmap(&arr2(&[[1.0, 1.0], [1.0, -1.0]]));
        assert!(rp_loss(ft.view(), fs.view()).unwrap().abs() < TOL);

        // zero second row: normalized source Gram is [[1,0],[0,0]]
        let fs2 = fmap(&arr2(&[[1.0, 1.0], [0.0, 0.0]]));
        let v = rp_loss(ft.view(), fs2.view()).unwrap();
        assert!((v - 0.5).abs() < TOL, "got {v}");
    }

    #[test]
    fn rp_is_scale_invariant_and_symmetric_in_value() {
        let ft = arr3(&[[[0.3, -1.0], [0.4, 0.2]], [[1.1, 0.7], [-0.3, 0.9]]]);
        let fs = arr3(&[[[0.8, 0.1], [-0.6, 1.2]], [[0.2, -0.4], [0.5, 0.3]]]);
        let base = rp_loss(ft.view(), fs.view()).unwrap();
        let scaled = fs.mapv(|v| 7.5 * v);
        let v = rp_loss(ft.view(), scaled.view()).unwrap();
        assert!((v - base).abs() < 1e-9, "{v} vs {base}");
        let sym = rp_loss(fs.view(), ft.view()).unwrap();
        assert!((sym - base).abs() < 1e-12);
    }

    #[test]
    fn rp_survives_all_zero_channels() {
        let ft = arr3(&[[[0.0, 0.0]], [[1.0, 2.0]]]);
        let fs = arr3(&[[[0.0, 0.0]], [[0.0, 0.0]]]);
        let v = rp_loss(ft.view(), fs.view()).unwrap();
        assert!(v.is_finite());
        let (_, g) = rp_loss_grad(ft.view(), fs.view()).unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn style_loss_examples() {
        let ft = fmap(&arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        assert!(style_loss(ft.view(), ft.view()).unwrap().abs() < TOL);

        let fs = fmap(&arr2(&[[1.0, 1.0], [1.0, -1.0]]));
        let v = style_loss(ft.view(), fs.view()).unwrap();
        assert!((v - 0.5).abs() < TOL, "got {v}");
    }

    #[test]
    fn style_is_scale_sensitive_where_rp_is_not() {
        let ft = arr3(&[[[0.3, -1.0, 0.2], [0.4, 0.2, 0.9], [0.1, 0.5, -0.2]]]);
        let ft = ft.into_shape_with_order((1, 3, 3)).unwrap();
        let mut fs = ft.clone();
        fs.mapv_inplace(|v| v * 0.9 + 0.05);
        let style_base = style_loss(ft.view(), fs.view()).unwrap();
        let rp_base = rp_loss(ft.view(), fs.view()).unwrap();
        let fs2 = fs.mapv(|v| 2.0 * v);
        let style_scaled = style_loss(ft.view(), fs2.view()).unwrap();
        let rp_scaled = rp_loss(ft.view(), fs2.view()).unwrap();
        assert!((rp_scaled - rp_base).abs() < 1e-5);
        assert!((style_scaled - style_base).abs() > 1e-3);
    }

    #[test]
    fn id_and_content_losses() {
        let x = Array4::from_shape_fn((2, 1, 4, 4), |(b, _, i, j)| {
            (b as f64) * 0.1 + (i + j) as f64 * 0.01
        });
        assert!(id_loss(x.view(), x.view()).unwrap().abs() < TOL);
        let shifted = x.mapv(|v| v + 0.1);
        let v = id_loss(shifted.view(), x.view()).unwrap();
        assert!((v - 0.1).abs() < TOL);

        let a = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        assert!(content_loss(a.view(), a.view()).unwrap().abs() < TOL);
        let b = arr2(&[[2.0, 2.0], [3.0, 2.0]]);
        // diffs: [1,0],[0,-2] -> per-sample ||.||^2/D: 0.5 and 2.0 -> mean 1.25
        let c = content_loss(b.view(), a.view()).unwrap();
        assert!((c - 1.25).abs() < TOL);
    }

    #[test]
    fn id_loss_matches_elementwise_oracle() {
        let mut k = 0.0;
        let gen = Array4::from_shape_fn((2, 1, 3, 3), |_| {
            k += 0.37;
            (k % 1.7) - 0.8
        });
        let mut k2 = 0.5;
        let orig = Array4::from_shape_fn((2, 1, 3, 3), |_| {
            k2 += 0.53;
            (k2 % 1.3) - 0.6
        });
        let oracle: f64 = gen
            .iter()
            .zip(orig.iter())
            .map(|(&a, &b): (&f64, &f64)| (a - b).abs())
            .sum::<f64>()
            / gen.len() as f64;
        let v = id_loss(gen.view(), orig.view()).unwrap();
        assert!((v - oracle).abs() < TOL);
    }

    #[test]
    fn diversity_loss_examples() {
        let uniform = Array2::from_elem((4, 10), 0.1);
        let v = diversity_loss(uniform.view()).unwrap();
        assert!((v + 10f64.ln()).abs() < TOL, "got {v}");

        let mut onehot = Array2::zeros((3, 5));
        for bi in 0..3 {
            onehot[[bi, 2]] = 1.0;
        }
        assert!(diversity_loss(onehot.view()).unwrap().abs() < TOL);

        let mixed = arr2(&[[0.7, 0.1, 0.2], [0.2, 0.5, 0.3]]);
        let v = diversity_loss(mixed.view()).unwrap();
        assert!(v <= 0.0 && v >= -(3f64.ln()) - TOL);
    }

    #[test]
    fn pseudo_label_examples() {
        let row = arr1(&[0.5, 0.3, 0.2]);
        // disagreement gate
        assert_eq!(pseudo_label_loss(row.view(), 0, 1).unwrap(), 0.0);
        // perfect confidence
        let sure = arr1(&[1.0, 0.0]);
        assert!(pseudo_label_loss(sure.view(), 0, 0).unwrap().abs() < TOL);
        // agreement at p = 0.5
        let v = pseudo_label_loss(row.view(), 0, 0).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < TOL);
        // out of range
        assert!(matches!(
            pseudo_label_loss(row.view(), 3, 3),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn pseudo_label_batch_means_over_agreeing_only() {
        let p = arr2(&[[0.5, 0.5], [0.25, 0.75], [0.9, 0.1]]);
        let (v, n, _) = pseudo_label_loss_batch(p.view(), &[0, 1, 0], &[0, 0, 1]).unwrap();
        // only sample 0 agrees: loss = ln 2
        assert_eq!(n, 1);
        assert!((v - std::f64::consts::LN_2).abs() < TOL);
        let (v0, n0, g) = pseudo_label_loss_batch(p.view(), &[0, 1, 0], &[1, 0, 1]).unwrap();
        assert_eq!((v0, n0), (0.0, 0));
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_similarity_examples() {
        let f = Array4::from_shape_fn((3, 2, 2, 2), |(b, d, i, j)| {
            0.3 * b as f64 - 0.2 * d as f64 + 0.1 * (i * 2 + j) as f64 + 0.05
        });
        assert!(batch_similarity_loss(f.view(), f.view()).unwrap().abs() < TOL);

        // B = 1: normalized 1x1 Gram is [1] for any nonzero features
        let one_t = Array4::from_elem((1, 2, 2, 2), 0.7);
        let one_s = Array4::from_elem((1, 2, 2, 2), -0.4);
        let v = batch_similarity_loss(one_t.view(), one_s.view()).unwrap();
        assert!(v.abs() < TOL, "got {v}");
    }

    #[test]
    fn pixel_similarity_identity_is_zero() {
        let f = Array4::from_shape_fn((2, 3, 2, 2), |(b, d, i, j)| {
            (b + d) as f64 * 0.2 + (i * 2 + j) as f64 * 0.1 - 0.4
        });
        assert!(pixel_similarity_loss(f.view(), f.view()).unwrap().abs() < TOL);
    }

    #[test]
    fn bn_stats_examples() {
        let stats = vec![(arr1(&[0.5, -0.5]), arr1(&[1.0, 2.0]))];
        assert!(bn_stats_loss(&stats, &stats).unwrap().abs() < TOL);

        let batch = vec![(arr1(&[1.0, 0.0]), arr1(&[1.0, 1.0]))];
        let run = vec![(arr1(&[0.0, 0.0]), arr1(&[1.0, 1.0]))];
        let v = bn_stats_loss(&batch, &run).unwrap();
        assert!((v - 1.0).abs() < TOL);

        let two = vec![
            (arr1(&[0.0]), arr1(&[1.0])),
            (arr1(&[0.0]), arr1(&[1.0])),
        ];
        assert!(matches!(
            bn_stats_loss(&batch, &two),
            Err(Error::LayerCountMismatch { .. })
        ));
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let terms = LossTerms {
            kd: 0.2,
            rp: 0.3,
            ..Default::default()
        };
        assert!((total_sfit_loss(&w, &terms) - 0.5).abs() < TOL);

        let no_rp = LossWeights {
            w_rp: 0.0,
            ..Default::default()
        };
        assert!((total_sfit_loss(&no_rp, &terms) - 0.2).abs() < TOL);

        let zero = LossWeights {
            w_kd: 0.0,
            w_rp: 0.0,
            w_style: 0.0,
            w_batch: 0.0,
            w_pixel: 0.0,
            w_bn: 0.0,
        };
        assert_eq!(total_sfit_loss(&zero, &terms), 0.0);
    }

    #[test]
    fn mmd_oracle_examples() {
        let fa = fmap(&arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        assert!(mmd_poly2_oracle(fa.view(), fa.view()).unwrap().abs() < TOL);

        let fb = fmap(&arr2(&[[1.0, 1.0], [1.0, -1.0]]));
        let v = mmd_poly2_oracle(fa.view(), fb.view()).unwrap();
        assert!((v - 2.0).abs() < TOL, "got {v}");
    }

    #[test]
    fn mmd_equals_d2_style_on_random_maps() {
        let mut k = 0.1f64;
        for _ in 0..10 {
            let fa = Array3::from_shape_fn((4, 3, 3), |_| {
                k = (k * 7.31 + 0.17) % 2.0;
                k - 1.0
            });
            let fb = Array3::from_shape_fn((4, 3, 3), |_| {
                k = (k * 5.77 + 0.23) % 2.0;
                k - 1.0
            });
            let style = style_loss(fa.view(), fb.view()).unwrap();
            let mmd = mmd_poly2_oracle(fa.view(), fb.view()).unwrap();
            let lhs = 16.0 * style;
            let rel = (lhs - mmd).abs() / mmd.abs().max(1e-12);
            assert!(rel < 1e-6, "rel {rel}");
        }
    }

    #[test]
    fn mmd_mean_estimator_is_zero_for_identical_sets() {
        let u = arr2(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]]);
        let (v, _, _) = mmd_poly2_mean_grad(u.view(), u.view()).unwrap();
        assert!(v.abs() < TOL);
    }
}
