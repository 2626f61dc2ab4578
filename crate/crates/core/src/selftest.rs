//! Self-contained verification checks: frozen analytic loss values, central
//! finite-difference gradient checks in f64, Gram-matrix properties with an
//! independent eigenvalue oracle, and the style/MMD equivalence sweep.
//!
//! The CLI `selftest` subcommand and the acceptance suite both run these.

use ndarray::{arr1, arr2, Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::losses;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn pass(name: &str, detail: String) -> Self {
        Check {
            name: name.into(),
            passed: true,
            detail,
        }
    }

    fn fail(name: &str, detail: String) -> Self {
        Check {
            name: name.into(),
            passed: false,
            detail,
        }
    }

    fn from_max_err(name: &str, max_err: f64, tol: f64) -> Self {
        if max_err <= tol {
            Check::pass(name, format!("max err {max_err:.3e} <= {tol:.1e}"))
        } else {
            Check::fail(name, format!("max err {max_err:.3e} > {tol:.1e}"))
        }
    }
}

/// Run every check group in order.
pub fn run_all() -> Vec<Check> {
    let mut checks = analytic_loss_checks();
    checks.extend(gradient_checks());
    checks.extend(gram_property_checks());
    checks.extend(mmd_equivalence_checks(50));
    checks
}

// ---------------------------------------------------------------------------
// group 1: frozen analytic values
// ---------------------------------------------------------------------------

fn near(name: &str, value: f64, expected: f64) -> Check {
    let err = (value - expected).abs();
    if err <= 1e-6 {
        Check::pass(name, format!("{value:.9} vs {expected:.9}"))
    } else {
        Check::fail(name, format!("{value:.9} vs {expected:.9} (err {err:.3e})"))
    }
}

fn fmap(rows: &Array2<f64>) -> Array3<f64> {
    let (d, p) = rows.dim();
    rows.clone()
        .into_shape_with_order((d, 1, p))
        .expect("same count")
}

pub fn analytic_loss_checks() -> Vec<Check> {
    let ln2 = std::f64::consts::LN_2;
    let mut out = Vec::new();

    let half = arr2(&[[0.5, 0.5]]);
    out.push(near(
        "kd: identical halves",
        losses::kd_loss(half.view(), half.view()).unwrap(),
        0.0,
    ));
    let pt = arr2(&[[1.0, 0.0]]);
    out.push(near(
        "kd: one-hot vs uniform = ln 2",
        losses::kd_loss(pt.view(), half.view()).unwrap(),
        ln2,
    ));
    let quarter = arr2(&[[0.25, 0.25, 0.25, 0.25]]);
    out.push(near(
        "kd: identical quarters",
        losses::kd_loss(quarter.view(), quarter.view()).unwrap(),
        0.0,
    ));

    let identity = fmap(&arr2(&[[1.0, 0.0], [0.0, 1.0]]));
    let rotated = fmap(&arr2(&[[1.0, 1.0], [1.0, -1.0]]));
    let degenerate = fmap(&arr2(&[[1.0, 1.0], [0.0, 0.0]]));
    out.push(near(
        "rp: identical maps",
        losses::rp_loss(identity.view(), identity.view()).unwrap(),
        0.0,
    ));
    out.push(near(
        "rp: scaled orthogonal rows still zero",
        losses::rp_loss(identity.view(), rotated.view()).unwrap(),
        0.0,
    ));
    out.push(near(
        "rp: degenerate source row = 0.5",
        losses::rp_loss(identity.view(), degenerate.view()).unwrap(),
        0.5,
    ));
    out.push(near(
        "style: identical maps",
        losses::style_loss(identity.view(), identity.view()).unwrap(),
        0.0,
    ));
    out.push(near(
        "style: hand value 0.5",
        losses::style_loss(identity.view(), rotated.view()).unwrap(),
        0.5,
    ));

    let uniform = Array2::from_elem((4, 10), 0.1);
    out.push(near(
        "diversity: uniform mean = -ln 10",
        losses::diversity_loss(uniform.view()).unwrap(),
        -(10f64.ln()),
    ));
    let mut onehot = Array2::zeros((3, 5));
    for bi in 0..3 {
        onehot[[bi, 2]] = 1.0;
    }
    out.push(near(
        "diversity: one-hot mean = 0",
        losses::diversity_loss(onehot.view()).unwrap(),
        0.0,
    ));

    let row = arr1(&[0.5, 0.3, 0.2]);
    out.push(near(
        "pseudo: disagreement gate",
        losses::pseudo_label_loss(row.view(), 0, 1).unwrap(),
        0.0,
    ));
    out.push(near(
        "pseudo: agreement at 0.5 = ln 2",
        losses::pseudo_label_loss(row.view(), 0, 0).unwrap(),
        ln2,
    ));
    let sure = arr1(&[1.0, 0.0]);
    out.push(near(
        "pseudo: perfect confidence",
        losses::pseudo_label_loss(sure.view(), 0, 0).unwrap(),
        0.0,
    ));
    out
}

// ---------------------------------------------------------------------------
// group 2: gradient checks
// ---------------------------------------------------------------------------

/// Central finite difference of a scalar function over a flat coordinate
/// vector; tolerance max(1e-4 abs, 1e-3 rel) per coordinate.
fn grad_check(
    name: &str,
    x0: &[f64],
    analytic: &[f64],
    step: f64,
    mut eval: impl FnMut(&[f64]) -> f64,
) -> Check {
    assert_eq!(x0.len(), analytic.len());
    let mut worst: f64 = 0.0;
    let mut worst_msg = String::new();
    let mut x = x0.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = eval(&x);
        x[i] = orig - step;
        let fm = eval(&x);
        x[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let err = (fd - analytic[i]).abs();
        let tol = 1e-4f64.max(1e-3 * fd.abs());
        let ratio = err / tol;
        if ratio > worst {
            worst = ratio;
            worst_msg = format!("coord {i}: fd {fd:.6e} vs {:.6e}", analytic[i]);
        }
    }
    if worst <= 1.0 {
        Check::pass(name, format!("worst err/tol {worst:.3}"))
    } else {
        Check::fail(name, format!("worst err/tol {worst:.3} ({worst_msg})"))
    }
}

fn random_map3(rng: &mut ChaCha20Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn((4, 3, 3), || rng.random_range(-1.0..1.0))
}

fn random_map4(rng: &mut ChaCha20Rng) -> Array4<f64> {
    Array4::from_shape_simple_fn((2, 4, 3, 3), || rng.random_range(-1.0..1.0))
}

fn random_probs(rng: &mut ChaCha20Rng, b: usize, c: usize) -> Array2<f64> {
    let mut p = Array2::from_shape_simple_fn((b, c), || rng.random_range(0.05..1.0));
    for mut row in p.axis_iter_mut(Axis(0)) {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

fn softmax64(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

fn as_slice4(a: &Array4<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

fn from_slice4(data: &[f64], dim: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_vec(dim, data.to_vec()).expect("same count")
}

pub fn gradient_checks() -> Vec<Check> {
    let mut rng = ChaCha20Rng::seed_from_u64(0x5f17);
    let mut out = Vec::new();
    // probability-space steps stay at 5e-4 so perturbed rows remain inside
    // the 1e-3 distribution-sum tolerance
    let p_step = 5e-4;
    let f_step = 1e-3;

    // KD w.r.t. source probabilities, and through the source softmax
    {
        let pt = random_probs(&mut rng, 2, 4);
        let ps = random_probs(&mut rng, 2, 4);
        let (_, g) = losses::kd_loss_grad(pt.view(), ps.view()).unwrap();
        let ps_flat = ps.as_slice().unwrap().to_vec();
        out.push(grad_check(
            "grad kd / d p_source",
            &ps_flat,
            g.as_slice().unwrap(),
            p_step,
            |x| {
                let p = Array2::from_shape_vec((2, 4), x.to_vec()).unwrap();
                losses::kd_loss(pt.view(), p.view()).unwrap()
            },
        ));

        let z = Array2::from_shape_simple_fn((2, 4), || rng.random_range(-1.0..1.0));
        let (_, gz) = losses::kd_grad_wrt_logits(pt.view(), softmax64(&z).view()).unwrap();
        out.push(grad_check(
            "grad kd / d logits",
            z.as_slice().unwrap(),
            gz.as_slice().unwrap(),
            f_step,
            |x| {
                let zz = Array2::from_shape_vec((2, 4), x.to_vec()).unwrap();
                losses::kd_loss(pt.view(), softmax64(&zz).view()).unwrap()
            },
        ));
    }

    // RP and style, single map and batched
    {
        let ft = random_map3(&mut rng);
        let fs = random_map3(&mut rng);
        let (_, g) = losses::rp_loss_grad(ft.view(), fs.view()).unwrap();
        out.push(grad_check(
            "grad rp / d f_source (4x3x3)",
            fs.as_slice().unwrap(),
            g.as_slice().unwrap(),
            f_step,
            |x| {
                let f = Array3::from_shape_vec((4, 3, 3), x.to_vec()).unwrap();
                losses::rp_loss(ft.view(), f.view()).unwrap()
            },
        ));
        let (_, gs) = losses::style_loss_grad(ft.view(), fs.view()).unwrap();
        out.push(grad_check(
            "grad style / d f_source (4x3x3)",
            fs.as_slice().unwrap(),
            gs.as_slice().unwrap(),
            f_step,
            |x| {
                let f = Array3::from_shape_vec((4, 3, 3), x.to_vec()).unwrap();
                losses::style_loss(ft.view(), f.view()).unwrap()
            },
        ));

        let bt = random_map4(&mut rng);
        let bs = random_map4(&mut rng);
        let (_, gb) = losses::rp_loss_batch(bt.view(), bs.view()).unwrap();
        out.push(grad_check(
            "grad rp / d f_source (2x4x3x3)",
            as_slice4(&bs),
            as_slice4(&gb),
            f_step,
            |x| {
                let f = from_slice4(x, (2, 4, 3, 3));
                losses::rp_loss_batch(bt.view(), f.view()).unwrap().0
            },
        ));
        let (_, gsb) = losses::style_loss_batch(bt.view(), bs.view()).unwrap();
        out.push(grad_check(
            "grad style / d f_source (2x4x3x3)",
            as_slice4(&bs),
            as_slice4(&gsb),
            f_step,
            |x| {
                let f = from_slice4(x, (2, 4, 3, 3));
                losses::style_loss_batch(bt.view(), f.view()).unwrap().0
            },
        ));
    }

    // content and ID
    {
        let orig = Array2::from_shape_simple_fn((2, 5), || rng.random_range(-1.0..1.0));
        let gen = Array2::from_shape_simple_fn((2, 5), || rng.random_range(-1.0..1.0));
        let (_, g) = losses::content_loss_grad(gen.view(), orig.view()).unwrap();
        out.push(grad_check(
            "grad content / d v_generated",
            gen.as_slice().unwrap(),
            g.as_slice().unwrap(),
            f_step,
            |x| {
                let v = Array2::from_shape_vec((2, 5), x.to_vec()).unwrap();
                losses::content_loss(v.view(), orig.view()).unwrap()
            },
        ));

        let xo = random_map4(&mut rng);
        let xg = random_map4(&mut rng);
        let (_, gi) = losses::id_loss_grad(xg.view(), xo.view()).unwrap();
        out.push(grad_check(
            "grad id / d generated",
            as_slice4(&xg),
            as_slice4(&gi),
            f_step,
            |x| {
                let v = from_slice4(x, (2, 4, 3, 3));
                losses::id_loss(v.view(), xo.view()).unwrap()
            },
        ));
    }

    // diversity, mean entropy, pseudo-label
    {
        let p = random_probs(&mut rng, 3, 5);
        let (_, g) = losses::diversity_loss_grad(p.view()).unwrap();
        out.push(grad_check(
            "grad diversity / d probs",
            p.as_slice().unwrap(),
            g.as_slice().unwrap(),
            p_step,
            |x| {
                let v = Array2::from_shape_vec((3, 5), x.to_vec()).unwrap();
                losses::diversity_loss(v.view()).unwrap()
            },
        ));
        let (_, ge) = losses::mean_entropy_grad(p.view()).unwrap();
        out.push(grad_check(
            "grad entropy / d probs",
            p.as_slice().unwrap(),
            ge.as_slice().unwrap(),
            p_step,
            |x| {
                let v = Array2::from_shape_vec((3, 5), x.to_vec()).unwrap();
                losses::mean_entropy_grad(v.view()).unwrap().0
            },
        ));

        let y_s = vec![0usize, 2, 1];
        let y_t = vec![0usize, 2, 0];
        let (_, _, gp) = losses::pseudo_label_loss_batch(p.view(), &y_s, &y_t).unwrap();
        out.push(grad_check(
            "grad pseudo / d p_target",
            p.as_slice().unwrap(),
            gp.as_slice().unwrap(),
            p_step,
            |x| {
                let v = Array2::from_shape_vec((3, 5), x.to_vec()).unwrap();
                losses::pseudo_label_loss_batch(v.view(), &y_s, &y_t)
                    .unwrap()
                    .0
            },
        ));
    }

    // batch- and pixel-wise variants
    {
        let bt = random_map4(&mut rng);
        let bs = random_map4(&mut rng);
        let (_, gb) = losses::batch_similarity_loss_grad(bt.view(), bs.view()).unwrap();
        out.push(grad_check(
            "grad batch-sim / d f_source",
            as_slice4(&bs),
            as_slice4(&gb),
            f_step,
            |x| {
                let f = from_slice4(x, (2, 4, 3, 3));
                losses::batch_similarity_loss(bt.view(), f.view()).unwrap()
            },
        ));
        let (_, gp) = losses::pixel_similarity_loss_grad(bt.view(), bs.view()).unwrap();
        out.push(grad_check(
            "grad pixel-sim / d f_source",
            as_slice4(&bs),
            as_slice4(&gp),
            f_step,
            |x| {
                let f = from_slice4(x, (2, 4, 3, 3));
                losses::pixel_similarity_loss(bt.view(), f.view()).unwrap()
            },
        ));
    }

    // BN-statistics alignment
    {
        let batch: Vec<(Array1<f64>, Array1<f64>)> = (0..2)
            .map(|_| {
                (
                    Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0)),
                    Array1::from_shape_simple_fn(3, || rng.random_range(0.1..2.0)),
                )
            })
            .collect();
        let running: Vec<(Array1<f64>, Array1<f64>)> = (0..2)
            .map(|_| {
                (
                    Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0)),
                    Array1::from_shape_simple_fn(3, || rng.random_range(0.1..2.0)),
                )
            })
            .collect();
        let (_, grads) = losses::bn_stats_loss_grad(&batch, &running).unwrap();
        let flat: Vec<f64> = batch
            .iter()
            .flat_map(|(m, v)| m.iter().chain(v.iter()).copied().collect::<Vec<_>>())
            .collect();
        let gflat: Vec<f64> = grads
            .iter()
            .flat_map(|(m, v)| m.iter().chain(v.iter()).copied().collect::<Vec<_>>())
            .collect();
        out.push(grad_check(
            "grad bn-stats / d batch stats",
            &flat,
            &gflat,
            f_step,
            |x| {
                let rebuilt: Vec<(Array1<f64>, Array1<f64>)> = (0..2)
                    .map(|l| {
                        (
                            Array1::from_vec(x[l * 6..l * 6 + 3].to_vec()),
                            Array1::from_vec(x[l * 6 + 3..l * 6 + 6].to_vec()),
                        )
                    })
                    .collect();
                losses::bn_stats_loss(&rebuilt, &running).unwrap()
            },
        ));
    }

    out
}

// ---------------------------------------------------------------------------
// group 3: Gram properties
// ---------------------------------------------------------------------------

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method; the
/// independent PSD oracle.
pub fn symmetric_eigenvalues(mat: &Array2<f64>) -> Vec<f64> {
    let n = mat.dim().0;
    assert_eq!(n, mat.dim().1);
    let mut a = mat.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[[i, i]]).collect()
}

pub fn gram_property_checks() -> Vec<Check> {
    let mut rng = ChaCha20Rng::seed_from_u64(0x97a3);
    let mut out = Vec::new();

    let mut max_asym: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    let mut max_rownorm_err: f64 = 0.0;
    for _ in 0..20 {
        let f = Array3::from_shape_simple_fn((6, 3, 3), || rng.random_range(-1.0..1.0));
        let g = losses::gram(f.view());
        for i in 0..6 {
            for j in 0..6 {
                max_asym = max_asym.max((g[[i, j]] - g[[j, i]]).abs());
            }
        }
        min_eig = symmetric_eigenvalues(&g)
            .into_iter()
            .fold(min_eig, f64::min);
        let gn = losses::normalize_rows(&g);
        for (row, raw) in gn.axis_iter(Axis(0)).zip(g.axis_iter(Axis(0))) {
            let pre = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if pre > 0.0 {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                max_rownorm_err = max_rownorm_err.max((norm - 1.0).abs());
            }
        }
    }
    out.push(Check::from_max_err("gram symmetry", max_asym, 1e-6));
    out.push(if min_eig >= -1e-5 {
        Check::pass("gram PSD (jacobi oracle)", format!("min eig {min_eig:.3e}"))
    } else {
        Check::fail("gram PSD (jacobi oracle)", format!("min eig {min_eig:.3e}"))
    });
    out.push(Check::from_max_err(
        "normalized rows have unit norm",
        max_rownorm_err,
        1e-5,
    ));

    // uniform-scale invariance of rp, non-invariance of style
    let ft = Array3::from_shape_simple_fn((6, 3, 3), || rng.random_range(-1.0..1.0));
    let fs = Array3::from_shape_simple_fn((6, 3, 3), || rng.random_range(-1.0..1.0));
    let rp0 = losses::rp_loss(ft.view(), fs.view()).unwrap();
    let style0 = losses::style_loss(ft.view(), fs.view()).unwrap();
    let mut max_rp_drift: f64 = 0.0;
    for alpha in [0.5, 2.0, 7.0] {
        let scaled = fs.mapv(|v| alpha * v);
        let rp = losses::rp_loss(ft.view(), scaled.view()).unwrap();
        max_rp_drift = max_rp_drift.max((rp - rp0).abs());
    }
    out.push(Check::from_max_err(
        "rp uniform-scale invariance",
        max_rp_drift,
        1e-5,
    ));
    let style2 = losses::style_loss(ft.view(), fs.mapv(|v| 2.0 * v).view()).unwrap();
    out.push(if (style2 - style0).abs() > 1e-5 {
        Check::pass(
            "style is scale sensitive",
            format!("|delta| {:.3e}", (style2 - style0).abs()),
        )
    } else {
        Check::fail(
            "style is scale sensitive",
            format!("|delta| {:.3e}", (style2 - style0).abs()),
        )
    });
    out
}

// ---------------------------------------------------------------------------
// group 4: style/MMD equivalence
// ---------------------------------------------------------------------------

pub fn mmd_equivalence_checks(pairs: usize) -> Vec<Check> {
    let mut rng = ChaCha20Rng::seed_from_u64(0x44d);
    let mut worst_rel: f64 = 0.0;
    for _ in 0..pairs {
        let fa = Array3::from_shape_simple_fn((4, 3, 3), || rng.random_range(-1.0..1.0));
        let fb = Array3::from_shape_simple_fn((4, 3, 3), || rng.random_range(-1.0..1.0));
        let style = losses::style_loss(fa.view(), fb.view()).unwrap();
        let mmd = losses::mmd_poly2_oracle(fa.view(), fb.view()).unwrap();
        let lhs = 16.0 * style; // D^2 with D = 4
        let rel = (lhs - mmd).abs() / mmd.abs().max(1e-12);
        worst_rel = worst_rel.max(rel);
    }
    vec![Check::from_max_err(
        &format!("D^2 * style == mmd_poly2 over {pairs} random pairs"),
        worst_rel,
        1e-6,
    )]
}
