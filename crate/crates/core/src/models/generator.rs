//! Residual encoder-decoder generator with tanh output. Downsamples twice,
//! applies 3 residual blocks, upsamples back with nearest-neighbor + conv.
//! Reflection padding throughout; instance norm without affine parameters.

use ndarray::{Array4, ArrayD, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::conv::ConvCache;
use crate::nn::norm::InCache;
use crate::nn::{init, ops, Conv2d, InstanceNorm2d, PadMode};

use super::checkpoint::{Checkpoint, TensorTaker};

const ENC1_CHANNELS: usize = 32;
const ENC2_CHANNELS: usize = 64;
const RES_CHANNELS: usize = 128;
pub const NUM_RES_BLOCKS: usize = 3;

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    norm: InstanceNorm2d,
}

struct ResCache {
    c1: ConvCache,
    n1: InCache,
    r1: Array4<f32>,
    c2: ConvCache,
    n2: InCache,
}

impl ResBlock {
    fn new(rng: &mut ChaCha20Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(
                init::conv_weight(RES_CHANNELS, RES_CHANNELS, 3, 3, rng),
                init::zeros1(RES_CHANNELS),
                1,
                1,
                PadMode::Reflect,
            ),
            conv2: Conv2d::new(
                init::conv_weight(RES_CHANNELS, RES_CHANNELS, 3, 3, rng),
                init::zeros1(RES_CHANNELS),
                1,
                1,
                PadMode::Reflect,
            ),
            norm: InstanceNorm2d::default(),
        }
    }

    fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, ResCache) {
        let (a1, c1) = self.conv1.forward(x);
        let (h1, n1) = self.norm.forward(&a1);
        let r1 = ops::relu(&h1);
        let (a2, c2) = self.conv2.forward(&r1);
        let (h2, n2) = self.norm.forward(&a2);
        let y = &h2 + x;
        (y, ResCache { c1, n1, r1, c2, n2 })
    }

    fn backward(
        &self,
        cache: &ResCache,
        d_out: &Array4<f32>,
        want_dw: bool,
    ) -> (Array4<f32>, Vec<ArrayD<f32>>) {
        let d_h2 = self.norm.backward(&cache.n2, d_out);
        let (d_r1, g2) = self.conv2.backward(&cache.c2, &d_h2, true, want_dw);
        let d_h1 = ops::relu_backward(&d_r1.expect("dx requested"), &cache.r1);
        let d_a1 = self.norm.backward(&cache.n1, &d_h1);
        let (d_x, g1) = self.conv1.backward(&cache.c1, &d_a1, true, want_dw);
        let mut d_in = d_x.expect("dx requested");
        d_in += d_out; // skip connection
        let grads = if want_dw {
            let g1 = g1.expect("requested");
            let g2 = g2.expect("requested");
            vec![
                g1.d_weight.into_dyn(),
                g1.d_bias.into_dyn(),
                g2.d_weight.into_dyn(),
                g2.d_bias.into_dyn(),
            ]
        } else {
            Vec::new()
        };
        (d_in, grads)
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub enc1: Conv2d,
    pub enc2: Conv2d,
    pub enc3: Conv2d,
    pub res: Vec<ResBlock>,
    pub dec1: Conv2d,
    pub dec2: Conv2d,
    pub out_conv: Conv2d,
    norm: InstanceNorm2d,
}

pub struct GeneratorCtx {
    enc1_c: ConvCache,
    enc1_n: InCache,
    enc1_r: Array4<f32>,
    enc2_c: ConvCache,
    enc2_n: InCache,
    enc2_r: Array4<f32>,
    enc3_c: ConvCache,
    enc3_n: InCache,
    enc3_r: Array4<f32>,
    res: Vec<ResCache>,
    dec1_c: ConvCache,
    dec1_n: InCache,
    dec1_r: Array4<f32>,
    dec2_c: ConvCache,
    dec2_n: InCache,
    dec2_r: Array4<f32>,
    out_c: ConvCache,
    y: Array4<f32>,
}

impl Generator {
    pub fn new(channels: usize, rng: &mut ChaCha20Rng) -> Self {
        Generator {
            enc1: Conv2d::new(
                init::conv_weight(ENC1_CHANNELS, channels, 7, 7, rng),
                init::zeros1(ENC1_CHANNELS),
                1,
                3,
                PadMode::Reflect,
            ),
            enc2: Conv2d::new(
                init::conv_weight(ENC2_CHANNELS, ENC1_CHANNELS, 3, 3, rng),
                init::zeros1(ENC2_CHANNELS),
                2,
                1,
                PadMode::Reflect,
            ),
            enc3: Conv2d::new(
                init::conv_weight(RES_CHANNELS, ENC2_CHANNELS, 3, 3, rng),
                init::zeros1(RES_CHANNELS),
                2,
                1,
                PadMode::Reflect,
            ),
            res: (0..NUM_RES_BLOCKS).map(|_| ResBlock::new(rng)).collect(),
            dec1: Conv2d::new(
                init::conv_weight(ENC2_CHANNELS, RES_CHANNELS, 3, 3, rng),
                init::zeros1(ENC2_CHANNELS),
                1,
                1,
                PadMode::Reflect,
            ),
            dec2: Conv2d::new(
                init::conv_weight(ENC1_CHANNELS, ENC2_CHANNELS, 3, 3, rng),
                init::zeros1(ENC1_CHANNELS),
                1,
                1,
                PadMode::Reflect,
            ),
            out_conv: Conv2d::new(
                init::conv_weight(channels, ENC1_CHANNELS, 7, 7, rng),
                init::zeros1(channels),
                1,
                3,
                PadMode::Reflect,
            ),
            norm: InstanceNorm2d::default(),
        }
    }

    pub fn channels(&self) -> usize {
        self.enc1.weight.dim().1
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.channels() {
            return Err(Error::shape(format!(
                "generator expects {} channels, batch has {c}",
                self.channels()
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
            return Err(Error::shape(format!(
                "generator input {h}x{w} must be divisible by 4 and at least 8"
            )));
        }
        Ok(())
    }

    /// Shape-preserving translation; outputs lie in (-1, 1) by tanh.
    pub fn forward(&self, x: &Array4<f32>) -> Result<(Array4<f32>, GeneratorCtx)> {
        self.check_input(x)?;
        let (a1, enc1_c) = self.enc1.forward(x);
        let (h1, enc1_n) = self.norm.forward(&a1);
        let enc1_r = ops::relu(&h1);
        let (a2, enc2_c) = self.enc2.forward(&enc1_r);
        let (h2, enc2_n) = self.norm.forward(&a2);
        let enc2_r = ops::relu(&h2);
        let (a3, enc3_c) = self.enc3.forward(&enc2_r);
        let (h3, enc3_n) = self.norm.forward(&a3);
        let enc3_r = ops::relu(&h3);

        let mut cur = enc3_r.clone();
        let mut res_caches = Vec::with_capacity(self.res.len());
        for block in &self.res {
            let (next, cache) = block.forward(&cur);
            res_caches.push(cache);
            cur = next;
        }

        let up1 = ops::upsample2(&cur);
        let (d1, dec1_c) = self.dec1.forward(&up1);
        let (hd1, dec1_n) = self.norm.forward(&d1);
        let dec1_r = ops::relu(&hd1);
        let up2 = ops::upsample2(&dec1_r);
        let (d2, dec2_c) = self.dec2.forward(&up2);
        let (hd2, dec2_n) = self.norm.forward(&d2);
        let dec2_r = ops::relu(&hd2);
        let (o, out_c) = self.out_conv.forward(&dec2_r);
        let y = ops::tanh(&o);

        Ok((
            y.clone(),
            GeneratorCtx {
                enc1_c,
                enc1_n,
                enc1_r,
                enc2_c,
                enc2_n,
                enc2_r,
                enc3_c,
                enc3_n,
                enc3_r,
                res: res_caches,
                dec1_c,
                dec1_n,
                dec1_r,
                dec2_c,
                dec2_n,
                dec2_r,
                out_c,
                y,
            },
        ))
    }

    /// Gradients for every parameter, in [`Generator::param_views_mut`] order.
    pub fn backward(&self, ctx: &GeneratorCtx, d_y: &Array4<f32>) -> Vec<ArrayD<f32>> {
        let d_o = ops::tanh_backward(d_y, &ctx.y);
        let (d_dec2r, out_g) = self.out_conv.backward(&ctx.out_c, &d_o, true, true);
        let d_hd2 = ops::relu_backward(&d_dec2r.expect("dx"), &ctx.dec2_r);
        let d_d2 = self.norm.backward(&ctx.dec2_n, &d_hd2);
        let (d_up2, dec2_g) = self.dec2.backward(&ctx.dec2_c, &d_d2, true, true);
        let d_dec1r = ops::upsample2_backward(&d_up2.expect("dx"));
        let d_hd1 = ops::relu_backward(&d_dec1r, &ctx.dec1_r);
        let d_d1 = self.norm.backward(&ctx.dec1_n, &d_hd1);
        let (d_up1, dec1_g) = self.dec1.backward(&ctx.dec1_c, &d_d1, true, true);
        let mut d_cur = ops::upsample2_backward(&d_up1.expect("dx"));

        let mut res_grads_rev = Vec::with_capacity(self.res.len());
        for (block, cache) in self.res.iter().zip(ctx.res.iter()).rev() {
            let (d_in, grads) = block.backward(cache, &d_cur, true);
            res_grads_rev.push(grads);
            d_cur = d_in;
        }

        let d_h3 = ops::relu_backward(&d_cur, &ctx.enc3_r);
        let d_a3 = self.norm.backward(&ctx.enc3_n, &d_h3);
        let (d_enc2r, enc3_g) = self.enc3.backward(&ctx.enc3_c, &d_a3, true, true);
        let d_h2 = ops::relu_backward(&d_enc2r.expect("dx"), &ctx.enc2_r);
        let d_a2 = self.norm.backward(&ctx.enc2_n, &d_h2);
        let (d_enc1r, enc2_g) = self.enc2.backward(&ctx.enc2_c, &d_a2, true, true);
        let d_h1 = ops::relu_backward(&d_enc1r.expect("dx"), &ctx.enc1_r);
        let d_a1 = self.norm.backward(&ctx.enc1_n, &d_h1);
        let (_, enc1_g) = self.enc1.backward(&ctx.enc1_c, &d_a1, false, true);

        let mut out = Vec::with_capacity(6 + 4 * self.res.len() + 2);
        for g in [enc1_g, enc2_g, enc3_g] {
            let g = g.expect("requested");
            out.push(g.d_weight.into_dyn());
            out.push(g.d_bias.into_dyn());
        }
        for grads in res_grads_rev.into_iter().rev() {
            out.extend(grads);
        }
        for g in [dec1_g, dec2_g, out_g] {
            let g = g.expect("requested");
            out.push(g.d_weight.into_dyn());
            out.push(g.d_bias.into_dyn());
        }
        out
    }

    pub fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<f32>> {
        let mut v = vec![
            self.enc1.weight.view_mut().into_dyn(),
            self.enc1.bias.view_mut().into_dyn(),
            self.enc2.weight.view_mut().into_dyn(),
            self.enc2.bias.view_mut().into_dyn(),
            self.enc3.weight.view_mut().into_dyn(),
            self.enc3.bias.view_mut().into_dyn(),
        ];
        for block in &mut self.res {
            v.push(block.conv1.weight.view_mut().into_dyn());
            v.push(block.conv1.bias.view_mut().into_dyn());
            v.push(block.conv2.weight.view_mut().into_dyn());
            v.push(block.conv2.bias.view_mut().into_dyn());
        }
        v.push(self.dec1.weight.view_mut().into_dyn());
        v.push(self.dec1.bias.view_mut().into_dyn());
        v.push(self.dec2.weight.view_mut().into_dyn());
        v.push(self.dec2.bias.view_mut().into_dyn());
        v.push(self.out_conv.weight.view_mut().into_dyn());
        v.push(self.out_conv.bias.view_mut().into_dyn());
        v
    }

    pub fn param_views(&self) -> Vec<ArrayViewD<f32>> {
        let mut v = vec![
            self.enc1.weight.view().into_dyn(),
            self.enc1.bias.view().into_dyn(),
            self.enc2.weight.view().into_dyn(),
            self.enc2.bias.view().into_dyn(),
            self.enc3.weight.view().into_dyn(),
            self.enc3.bias.view().into_dyn(),
        ];
        for block in &self.res {
            v.push(block.conv1.weight.view().into_dyn());
            v.push(block.conv1.bias.view().into_dyn());
            v.push(block.conv2.weight.view().into_dyn());
            v.push(block.conv2.bias.view().into_dyn());
        }
        v.push(self.dec1.weight.view().into_dyn());
        v.push(self.dec1.bias.view().into_dyn());
        v.push(self.dec2.weight.view().into_dyn());
        v.push(self.dec2.bias.view().into_dyn());
        v.push(self.out_conv.weight.view().into_dyn());
        v.push(self.out_conv.bias.view().into_dyn());
        v
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, ArrayD<f32>)> = vec![
            ("enc1.weight".into(), self.enc1.weight.clone().into_dyn()),
            ("enc1.bias".into(), self.enc1.bias.clone().into_dyn()),
            ("enc2.weight".into(), self.enc2.weight.clone().into_dyn()),
            ("enc2.bias".into(), self.enc2.bias.clone().into_dyn()),
            ("enc3.weight".into(), self.enc3.weight.clone().into_dyn()),
            ("enc3.bias".into(), self.enc3.bias.clone().into_dyn()),
        ];
        for (i, block) in self.res.iter().enumerate() {
            let n = i + 1;
            tensors.push((
                format!("res{n}.conv1.weight"),
                block.conv1.weight.clone().into_dyn(),
            ));
            tensors.push((
                format!("res{n}.conv1.bias"),
                block.conv1.bias.clone().into_dyn(),
            ));
            tensors.push((
                format!("res{n}.conv2.weight"),
                block.conv2.weight.clone().into_dyn(),
            ));
            tensors.push((
                format!("res{n}.conv2.bias"),
                block.conv2.bias.clone().into_dyn(),
            ));
        }
        tensors.push(("dec1.weight".into(), self.dec1.weight.clone().into_dyn()));
        tensors.push(("dec1.bias".into(), self.dec1.bias.clone().into_dyn()));
        tensors.push(("dec2.weight".into(), self.dec2.weight.clone().into_dyn()));
        tensors.push(("dec2.bias".into(), self.dec2.bias.clone().into_dyn()));
        tensors.push((
            "out.weight".into(),
            self.out_conv.weight.clone().into_dyn(),
        ));
        tensors.push(("out.bias".into(), self.out_conv.bias.clone().into_dyn()));
        Checkpoint::new(tensors)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = TensorTaker::new(ck);
        let conv = |t: &mut TensorTaker,
                    name: &str,
                    stride: usize,
                    pad: usize|
         -> Result<Conv2d> {
            Ok(Conv2d::new(
                t.take_dim(&format!("{name}.weight"))?,
                t.take_dim(&format!("{name}.bias"))?,
                stride,
                pad,
                PadMode::Reflect,
            ))
        };
        let enc1 = conv(&mut t, "enc1", 1, 3)?;
        let enc2 = conv(&mut t, "enc2", 2, 1)?;
        let enc3 = conv(&mut t, "enc3", 2, 1)?;
        let mut res = Vec::with_capacity(NUM_RES_BLOCKS);
        for n in 1..=NUM_RES_BLOCKS {
            res.push(ResBlock {
                conv1: conv(&mut t, &format!("res{n}.conv1"), 1, 1)?,
                conv2: conv(&mut t, &format!("res{n}.conv2"), 1, 1)?,
                norm: InstanceNorm2d::default(),
            });
        }
        let dec1 = conv(&mut t, "dec1", 1, 1)?;
        let dec2 = conv(&mut t, "dec2", 1, 1)?;
        let out_conv = conv(&mut t, "out", 1, 3)?;
        t.finish()?;
        Ok(Generator {
            enc1,
            enc2,
            enc3,
            res,
            dec1,
            dec2,
            out_conv,
            norm: InstanceNorm2d::default(),
        })
    }

    pub fn state_hash(&self) -> [u8; 32] {
        self.to_checkpoint().state_hash()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn output_shape_and_range() {
        let g = Generator::new(1, &mut rng(0));
        let mut r = rng(1);
        let x = Array4::from_shape_fn((16, 1, 28, 28), |_| r.random_range(-1.0..1.0f32));
        let (y, _) = g.forward(&x).unwrap();
        assert_eq!(y.dim(), (16, 1, 28, 28));
        assert!(y.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_bad_input_shape() {
        let g = Generator::new(1, &mut rng(0));
        let x = Array4::<f32>::zeros((1, 1, 30, 30));
        assert!(g.forward(&x).is_err());
        let x3 = Array4::<f32>::zeros((1, 3, 28, 28));
        assert!(g.forward(&x3).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = Generator::new(3, &mut rng(5));
        let ck = g.to_checkpoint();
        let restored = Generator::from_checkpoint(ck.clone()).unwrap();
        assert_eq!(ck, restored.to_checkpoint());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut g = Generator::new(1, &mut rng(3));
        let mut r = rng(7);
        let x = Array4::from_shape_fn((1, 1, 16, 16), |_| r.random_range(-1.0..1.0f32));
        let coeffs = Array4::from_shape_fn((1, 1, 16, 16), |_| r.random_range(-1.0..1.0f32));
        let loss = |g: &Generator, x: &Array4<f32>| -> f32 {
            let (y, _) = g.forward(x).unwrap();
            (&y * &coeffs).sum()
        };
        let (_, ctx) = g.forward(&x).unwrap();
        let grads = g.backward(&ctx, &coeffs);
        assert_eq!(grads.len(), g.param_views().len());

        // Instance norm centers thousands of activations near the ReLU kink,
        // so finite differences need a small step and a tolerance that
        // absorbs the O(eps) kink-crossing error.
        let eps = 1e-3f32;
        let probes: Vec<(usize, Vec<usize>)> = vec![
            (0, vec![3, 0, 1, 2]),   // enc1.weight
            (6, vec![10, 3, 1, 1]),  // res1.conv1.weight
            (18, vec![7, 19, 0, 2]), // dec1.weight
            (22, vec![0, 7, 3, 3]),  // out.weight
        ];
        for (pi, coord) in probes {
            let fd = {
                let mut views = g.param_views_mut();
                let w0 = views[pi][coord.as_slice()];
                views[pi][coord.as_slice()] = w0 + eps;
                drop(views);
                let lp = loss(&g, &x);
                let mut views = g.param_views_mut();
                views[pi][coord.as_slice()] = w0 - eps;
                drop(views);
                let lm = loss(&g, &x);
                let mut views = g.param_views_mut();
                views[pi][coord.as_slice()] = w0;
                drop(views);
                (lp - lm) / (2.0 * eps)
            };
            let an = grads[pi][coord.as_slice()];
            let tol = 0.08f32.max(0.1 * fd.abs());
            assert!(
                (fd - an).abs() < tol,
                "param {pi} {coord:?}: fd {fd} vs analytic {an}"
            );
        }
    }
}
