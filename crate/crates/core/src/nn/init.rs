//! Kaiming-uniform initialization. Tensors are filled in row-major order from
//! one RNG stream, so a model's initial weights are a pure function of the
//! seed and the declaration order of its layers.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

fn bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f32).sqrt()
}

pub fn conv_weight(
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    rng: &mut ChaCha20Rng,
) -> Array4<f32> {
    let b = bound(c_in * kh * kw);
    Array4::from_shape_simple_fn((c_out, c_in, kh, kw), || rng.random_range(-b..b))
}

pub fn linear_weight(out: usize, inp: usize, rng: &mut ChaCha20Rng) -> Array2<f32> {
    let b = bound(inp);
    Array2::from_shape_simple_fn((out, inp), || rng.random_range(-b..b))
}

pub fn zeros1(n: usize) -> Array1<f32> {
    Array1::zeros(n)
}
