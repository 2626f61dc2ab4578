//! Procedural 28x28 digit renderer: ten glyph bitmaps pushed through random
//! affine jitter, stroke-weight variation, and pixel noise. Serves as the
//! labeled base set for synthetic two-domain pairs when no IDX files are
//! available.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

const GLYPH_W: usize = 8;
const GLYPH_H: usize = 12;
const IMG: usize = 28;

#[rustfmt::skip]
const GLYPHS: [[&str; GLYPH_H]; 10] = [
    [ // 0
        "..####..",
        ".#....#.",
        "#......#",
        "#......#",
        "#......#",
        "#......#",
        "#......#",
        "#......#",
        "#......#",
        "#......#",
        ".#....#.",
        "..####..",
    ],
    [ // 1
        "...##...",
        "..###...",
        ".#.##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        ".######.",
    ],
    [ // 2
        "..####..",
        ".#....#.",
        "#......#",
        ".......#",
        "......##",
        ".....##.",
        "....##..",
        "...##...",
        "..##....",
        ".##.....",
        "##......",
        "########",
    ],
    [ // 3
        "..####..",
        ".#....#.",
        ".......#",
        ".......#",
        "...###..",
        ".......#",
        ".......#",
        ".......#",
        ".......#",
        "#......#",
        ".#....#.",
        "..####..",
    ],
    [ // 4
        "....##..",
        "...###..",
        "..##.#..",
        ".##..#..",
        "##...#..",
        "##...#..",
        "########",
        ".....#..",
        ".....#..",
        ".....#..",
        ".....#..",
        ".....#..",
    ],
    [ // 5
        "#######.",
        "#.......",
        "#.......",
        "#.......",
        "#####...",
        ".....#..",
        "......#.",
        ".......#",
        ".......#",
        ".......#",
        "#.....#.",
        ".#####..",
    ],
    [ // 6
        "..####..",
        ".#....#.",
        "#.......",
        "#.......",
        "#.####..",
        "##....#.",
        "#......#",
        "#......#",
        "#......#",
        "#......#",
        ".#....#.",
        "..####..",
    ],
    [ // 7
        "########",
        "......##",
        "......##",
        ".....##.",
        ".....##.",
        "....##..",
        "....##..",
        "...##...",
        "...##...",
        "..##....",
        "..##....",
        "..##....",
    ],
    [ // 8
        "..####..",
        ".#....#.",
        "#......#",
        "#......#",
        ".#....#.",
        "..####..",
        ".#....#.",
        "#......#",
        "#......#",
        "#......#",
        ".#....#.",
        "..####..",
    ],
    [ // 9
        "..####..",
        ".#....#.",
        "#......#",
        "#......#",
        "#......#",
        ".#...##.",
        "..###.#.",
        ".......#",
        ".......#",
        ".......#",
        ".#....#.",
        "..####..",
    ],
];

#[inline]
fn glyph_at(digit: usize, gx: f32, gy: f32) -> f32 {
    if gx < 0.0 || gy < 0.0 {
        return 0.0;
    }
    let x0 = gx.floor() as usize;
    let y0 = gy.floor() as usize;
    let tx = gx - x0 as f32;
    let ty = gy - y0 as f32;
    let ink = |x: usize, y: usize| -> f32 {
        if x < GLYPH_W && y < GLYPH_H {
            let row = GLYPHS[digit][y].as_bytes();
            if row[x] == b'#' {
                1.0
            } else {
                0.0
            }
        } else {
            0.0
        }
    };
    let v00 = ink(x0, y0);
    let v01 = ink(x0 + 1, y0);
    let v10 = ink(x0, y0 + 1);
    let v11 = ink(x0 + 1, y0 + 1);
    let top = v00 + (v01 - v00) * tx;
    let bot = v10 + (v11 - v10) * tx;
    top + (bot - top) * ty
}

struct Jitter {
    // inverse affine (image -> glyph), row-major 2x2
    inv: [f32; 4],
    tx: f32,
    ty: f32,
    intensity: f32,
    gamma: f32,
}

fn sample_jitter(rng: &mut ChaCha20Rng) -> Jitter {
    let theta: f32 = rng.random_range(-0.18..0.18);
    let shear: f32 = rng.random_range(-0.18..0.18);
    let sx: f32 = rng.random_range(0.85..1.15);
    let sy: f32 = rng.random_range(0.85..1.15);
    let tx: f32 = rng.random_range(-2.0..2.0);
    let ty: f32 = rng.random_range(-2.0..2.0);
    let intensity: f32 = rng.random_range(0.78..1.0);
    let gamma: f32 = rng.random_range(0.55..1.25);

    // forward: p_img = T + R(theta) * Shear * diag(sx*base, sy*base) * p_glyph
    let base = 20.0 / GLYPH_H as f32; // digit occupies ~20 of 28 pixels
    let (sin, cos) = theta.sin_cos();
    let fwd = [
        cos * sx * base,
        (cos * shear - sin) * sy * base,
        sin * sx * base,
        (sin * shear + cos) * sy * base,
    ];
    let det = fwd[0] * fwd[3] - fwd[1] * fwd[2];
    let inv = [fwd[3] / det, -fwd[1] / det, -fwd[2] / det, fwd[0] / det];
    Jitter {
        inv,
        tx,
        ty,
        intensity,
        gamma,
    }
}

fn render(digit: usize, j: &Jitter, noise: &mut impl FnMut() -> f32, out: &mut [u8]) {
    let cx = IMG as f32 / 2.0;
    let cy = IMG as f32 / 2.0;
    let gcx = GLYPH_W as f32 / 2.0;
    let gcy = GLYPH_H as f32 / 2.0;
    // 2x2 supersampling offsets
    const SUB: [(f32, f32); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];
    for oy in 0..IMG {
        for ox in 0..IMG {
            let mut acc = 0.0f32;
            for (dx, dy) in SUB {
                let px = ox as f32 + dx - cx - j.tx;
                let py = oy as f32 + dy - cy - j.ty;
                let gx = j.inv[0] * px + j.inv[1] * py + gcx - 0.5;
                let gy = j.inv[2] * px + j.inv[3] * py + gcy - 0.5;
                acc += glyph_at(digit, gx, gy);
            }
            let ink = (acc / 4.0).powf(j.gamma) * j.intensity;
            let v = (ink + noise()).clamp(0.0, 1.0);
            out[oy * IMG + ox] = (v * 255.0).round() as u8;
        }
    }
}

/// Render `n` labeled digits. The byte images and labels are a pure function
/// of (n, seed).
pub fn synth_digits(n: usize, seed: u64) -> (Array3<u8>, Vec<u8>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.04).expect("valid sigma");
    let mut images = Array3::<u8>::zeros((n, IMG, IMG));
    let mut labels = Vec::with_capacity(n);
    let mut buf = vec![0u8; IMG * IMG];
    for i in 0..n {
        let digit = rng.random_range(0..10usize);
        let jitter = sample_jitter(&mut rng);
        let mut noise = || normal.sample(&mut rng);
        render(digit, &jitter, &mut noise, &mut buf);
        images
            .index_axis_mut(ndarray::Axis(0), i)
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(&buf);
        labels.push(digit as u8);
    }
    (images, labels)
}
