//! Digit classifier: feature extractor `f` (two conv+BN+ReLU+maxpool blocks,
//! then a 500-unit ReLU layer) and classifier head `p` (one linear layer).
//!
//! The RP-loss feature map is the second block's post-pool output
//! (B x 50 x H/4 x W/4); the pooled feature is the 500-dim ReLU output.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::conv::ConvCache;
use crate::nn::norm::{stats_backward, BnCache};
use crate::nn::{init, ops, BatchNorm2d, Conv2d, Linear, PadMode};

use super::checkpoint::{Checkpoint, TensorTaker};

pub const CONV1_CHANNELS: usize = 20;
pub const CONV2_CHANNELS: usize = 50;
pub const POOLED_DIM: usize = 500;

#[derive(Debug, Clone)]
pub struct Classifier {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub fc1: Linear,
    pub head: Linear,
}

/// Everything a forward pass exposes to losses and evaluation.
pub struct ClassifierOutput {
    /// Post-pool feature map of the last conv block (B, 50, H/4, W/4).
    pub feature_map: Array4<f32>,
    /// 500-dim ReLU feature entering the head.
    pub pooled: Array2<f32>,
    pub logits: Array2<f32>,
    pub probs: Array2<f32>,
    /// Biased batch statistics of the pre-BN activations, per BN layer
    /// in order [bn1, bn2].
    pub bn_batch_stats: Vec<(Array1<f32>, Array1<f32>)>,
}

pub struct ClassifierCtx {
    conv1_cache: ConvCache,
    a1: Array4<f32>,
    bn1_cache: BnCache,
    r1: Array4<f32>,
    arg1: Array4<u8>,
    conv2_cache: ConvCache,
    a2: Array4<f32>,
    bn2_cache: BnCache,
    r2: Array4<f32>,
    arg2: Array4<u8>,
    flat: Array2<f32>,
    pooled: Array2<f32>,
    fm_dim: (usize, usize, usize, usize),
}

/// Gradient contributions injected at the branch outputs; any subset may be
/// present and they are accumulated during the backward sweep.
#[derive(Default)]
pub struct BranchGrads {
    pub d_logits: Option<Array2<f32>>,
    pub d_pooled: Option<Array2<f32>>,
    pub d_feature_map: Option<Array4<f32>>,
    /// Per BN layer (d_mean, d_var) in order [bn1, bn2].
    pub d_bn_stats: Option<Vec<(Array1<f32>, Array1<f32>)>>,
}

pub struct ClassifierGrads {
    pub conv1_w: Array4<f32>,
    pub conv1_b: Array1<f32>,
    pub bn1_g: Array1<f32>,
    pub bn1_b: Array1<f32>,
    pub conv2_w: Array4<f32>,
    pub conv2_b: Array1<f32>,
    pub bn2_g: Array1<f32>,
    pub bn2_b: Array1<f32>,
    pub fc1_w: Array2<f32>,
    pub fc1_b: Array1<f32>,
    pub head_w: Array2<f32>,
    pub head_b: Array1<f32>,
}

impl ClassifierGrads {
    /// Flatten in the same order as [`Classifier::param_views_mut`].
    pub fn into_vec(self, include_head: bool) -> Vec<ArrayD<f32>> {
        let mut v = vec![
            self.conv1_w.into_dyn(),
            self.conv1_b.into_dyn(),
            self.bn1_g.into_dyn(),
            self.bn1_b.into_dyn(),
            self.conv2_w.into_dyn(),
            self.conv2_b.into_dyn(),
            self.bn2_g.into_dyn(),
            self.bn2_b.into_dyn(),
            self.fc1_w.into_dyn(),
            self.fc1_b.into_dyn(),
        ];
        if include_head {
            v.push(self.head_w.into_dyn());
            v.push(self.head_b.into_dyn());
        }
        v
    }
}

impl Classifier {
    /// Fresh Kaiming-uniform initialization for square inputs of side `hw`.
    pub fn new(in_channels: usize, num_classes: usize, hw: usize, rng: &mut ChaCha20Rng) -> Self {
        assert!(hw % 4 == 0, "input side must be divisible by 4");
        let flat = CONV2_CHANNELS * (hw / 4) * (hw / 4);
        Classifier {
            conv1: Conv2d::new(
                init::conv_weight(CONV1_CHANNELS, in_channels, 5, 5, rng),
                init::zeros1(CONV1_CHANNELS),
                1,
                2,
                PadMode::Zero,
            ),
            bn1: BatchNorm2d::new(CONV1_CHANNELS),
            conv2: Conv2d::new(
                init::conv_weight(CONV2_CHANNELS, CONV1_CHANNELS, 5, 5, rng),
                init::zeros1(CONV2_CHANNELS),
                1,
                2,
                PadMode::Zero,
            ),
            bn2: BatchNorm2d::new(CONV2_CHANNELS),
            fc1: Linear::new(
                init::linear_weight(POOLED_DIM, flat, rng),
                init::zeros1(POOLED_DIM),
            ),
            head: Linear::new(
                init::linear_weight(num_classes, POOLED_DIM, rng),
                init::zeros1(num_classes),
            ),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.weight.dim().1
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "classifier expects {} channels, batch has {c}",
                self.in_channels()
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("input {h}x{w} not divisible by 4")));
        }
        let flat = CONV2_CHANNELS * (h / 4) * (w / 4);
        if flat != self.fc1.weight.dim().1 {
            return Err(Error::shape(format!(
                "input {h}x{w} implies {flat} flat features, fc1 expects {}",
                self.fc1.weight.dim().1
            )));
        }
        Ok(())
    }

    /// Train-mode forward: BN uses batch statistics and updates its running
    /// estimates.
    pub fn forward_train(&mut self, x: &Array4<f32>) -> Result<(ClassifierOutput, ClassifierCtx)> {
        self.check_input(x)?;
        let (a1, conv1_cache) = self.conv1.forward(x);
        let (n1, bn1_cache) = self.bn1.forward(&a1, true);
        let (a2_in, arg1, r1) = pool_relu(&n1);
        let (a2, conv2_cache) = self.conv2.forward(&a2_in);
        let (n2, bn2_cache) = self.bn2.forward(&a2, true);
        let (fm, arg2, r2) = pool_relu(&n2);
        Ok(self.finish_forward(
            conv1_cache,
            a1,
            bn1_cache,
            r1,
            arg1,
            conv2_cache,
            a2,
            bn2_cache,
            r2,
            arg2,
            fm,
        ))
    }

    /// Eval-mode forward: BN uses frozen running statistics; nothing mutates.
    pub fn forward_eval(&self, x: &Array4<f32>) -> Result<(ClassifierOutput, ClassifierCtx)> {
        self.check_input(x)?;
        let (a1, conv1_cache) = self.conv1.forward(x);
        let (n1, bn1_cache) = self.bn1.forward_frozen(&a1);
        let (a2_in, arg1, r1) = pool_relu(&n1);
        let (a2, conv2_cache) = self.conv2.forward(&a2_in);
        let (n2, bn2_cache) = self.bn2.forward_frozen(&a2);
        let (fm, arg2, r2) = pool_relu(&n2);
        Ok(self.finish_forward(
            conv1_cache,
            a1,
            bn1_cache,
            r1,
            arg1,
            conv2_cache,
            a2,
            bn2_cache,
            r2,
            arg2,
            fm,
        ))
    }

    /// Eval-mode forward when no backward pass is needed.
    pub fn infer(&self, x: &Array4<f32>) -> Result<ClassifierOutput> {
        Ok(self.forward_eval(x)?.0)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_forward(
        &self,
        conv1_cache: ConvCache,
        a1: Array4<f32>,
        bn1_cache: BnCache,
        r1: Array4<f32>,
        arg1: Array4<u8>,
        conv2_cache: ConvCache,
        a2: Array4<f32>,
        bn2_cache: BnCache,
        r2: Array4<f32>,
        arg2: Array4<u8>,
        fm: Array4<f32>,
    ) -> (ClassifierOutput, ClassifierCtx) {
        let (b, c, fh, fw) = fm.dim();
        let flat = fm
            .clone()
            .into_shape_with_order((b, c * fh * fw))
            .expect("contiguous feature map");
        let pooled = ops::relu2(&self.fc1.forward(&flat));
        let logits = self.head.forward(&pooled);
        let probs = ops::softmax(&logits);
        let bn_batch_stats = vec![
            (bn1_cache.batch_mean.clone(), bn1_cache.batch_var.clone()),
            (bn2_cache.batch_mean.clone(), bn2_cache.batch_var.clone()),
        ];
        (
            ClassifierOutput {
                feature_map: fm,
                pooled: pooled.clone(),
                logits,
                probs,
                bn_batch_stats,
            },
            ClassifierCtx {
                conv1_cache,
                a1,
                bn1_cache,
                r1,
                arg1,
                conv2_cache,
                a2,
                bn2_cache,
                r2,
                arg2,
                flat,
                pooled,
                fm_dim: (b, c, fh, fw),
            },
        )
    }

    /// Backward sweep. Accumulates every supplied branch gradient, returns
    /// parameter gradients and/or the input-image gradient as requested.
    pub fn backward(
        &self,
        ctx: &ClassifierCtx,
        grads: BranchGrads,
        want_param_grads: bool,
        want_input_grad: bool,
    ) -> (Option<ClassifierGrads>, Option<Array4<f32>>) {

        let mut d_pooled = Array2::<f32>::zeros(ctx.pooled.dim());
        let mut head_grads: Option<(Array2<f32>, Array1<f32>)> = None;
        if let Some(d_logits) = &grads.d_logits {
            let (dp, dw, db) = self.head.backward(&ctx.pooled, d_logits);
            d_pooled += &dp;
            head_grads = Some((dw, db));
        }
        if let Some(dp) = &grads.d_pooled {
            d_pooled += dp;
        }

        let d_fc1_out = ops::relu2_backward(&d_pooled, &ctx.pooled);
        let (d_flat, fc1_w, fc1_b) = self.fc1.backward(&ctx.flat, &d_fc1_out);
        let mut d_fm = d_flat
            .into_shape_with_order(ctx.fm_dim)
            .expect("contiguous flat grad");
        if let Some(dfm) = &grads.d_feature_map {
            d_fm += dfm;
        }

        let d_r2 = ops::maxpool2_backward(&d_fm, &ctx.arg2);
        let d_n2 = ops::relu_backward(&d_r2, &ctx.r2);
        let (mut d_a2, bn2_g, bn2_b) = self.bn2.backward(&ctx.bn2_cache, &d_n2);
        if let Some(stats) = &grads.d_bn_stats {
            d_a2 += &stats_backward(
                &ctx.a2,
                &ctx.bn2_cache.batch_mean,
                &stats[1].0,
                &stats[1].1,
            );
        }
        let (d_p1, conv2_grads) =
            self.conv2
                .backward(&ctx.conv2_cache, &d_a2, true, want_param_grads);

        let d_r1 = ops::maxpool2_backward(&d_p1.expect("dx requested"), &ctx.arg1);
        let d_n1 = ops::relu_backward(&d_r1, &ctx.r1);
        let (mut d_a1, bn1_g, bn1_b) = self.bn1.backward(&ctx.bn1_cache, &d_n1);
        if let Some(stats) = &grads.d_bn_stats {
            d_a1 += &stats_backward(
                &ctx.a1,
                &ctx.bn1_cache.batch_mean,
                &stats[0].0,
                &stats[0].1,
            );
        }
        let (d_input, conv1_grads) =
            self.conv1
                .backward(&ctx.conv1_cache, &d_a1, want_input_grad, want_param_grads);

        let param_grads = want_param_grads.then(|| {
            let (head_w, head_b) = head_grads.unwrap_or_else(|| {
                (
                    Array2::zeros(self.head.weight.dim()),
                    Array1::zeros(self.head.bias.len()),
                )
            });
            let c2 = conv2_grads.expect("requested");
            let c1 = conv1_grads.expect("requested");
            ClassifierGrads {
                conv1_w: c1.d_weight,
                conv1_b: c1.d_bias,
                bn1_g,
                bn1_b,
                conv2_w: c2.d_weight,
                conv2_b: c2.d_bias,
                bn2_g,
                bn2_b,
                fc1_w,
                fc1_b,
                head_w,
                head_b,
            }
        });
        (param_grads, d_input)
    }

    /// Trainable parameters in optimizer order; the head is last so it can be
    /// frozen by truncation.
    pub fn param_views_mut(&mut self, include_head: bool) -> Vec<ArrayViewMutD<f32>> {
        let mut v = vec![
            self.conv1.weight.view_mut().into_dyn(),
            self.conv1.bias.view_mut().into_dyn(),
            self.bn1.gamma.view_mut().into_dyn(),
            self.bn1.beta.view_mut().into_dyn(),
            self.conv2.weight.view_mut().into_dyn(),
            self.conv2.bias.view_mut().into_dyn(),
            self.bn2.gamma.view_mut().into_dyn(),
            self.bn2.beta.view_mut().into_dyn(),
            self.fc1.weight.view_mut().into_dyn(),
            self.fc1.bias.view_mut().into_dyn(),
        ];
        if include_head {
            v.push(self.head.weight.view_mut().into_dyn());
            v.push(self.head.bias.view_mut().into_dyn());
        }
        v
    }

    pub fn param_views(&self, include_head: bool) -> Vec<ArrayViewD<f32>> {
        let mut v = vec![
            self.conv1.weight.view().into_dyn(),
            self.conv1.bias.view().into_dyn(),
            self.bn1.gamma.view().into_dyn(),
            self.bn1.beta.view().into_dyn(),
            self.conv2.weight.view().into_dyn(),
            self.conv2.bias.view().into_dyn(),
            self.bn2.gamma.view().into_dyn(),
            self.bn2.beta.view().into_dyn(),
            self.fc1.weight.view().into_dyn(),
            self.fc1.bias.view().into_dyn(),
        ];
        if include_head {
            v.push(self.head.weight.view().into_dyn());
            v.push(self.head.bias.view().into_dyn());
        }
        v
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(vec![
            ("conv1.weight".into(), self.conv1.weight.clone().into_dyn()),
            ("conv1.bias".into(), self.conv1.bias.clone().into_dyn()),
            ("bn1.gamma".into(), self.bn1.gamma.clone().into_dyn()),
            ("bn1.beta".into(), self.bn1.beta.clone().into_dyn()),
            (
                "bn1.running_mean".into(),
                self.bn1.running_mean.clone().into_dyn(),
            ),
            (
                "bn1.running_var".into(),
                self.bn1.running_var.clone().into_dyn(),
            ),
            ("conv2.weight".into(), self.conv2.weight.clone().into_dyn()),
            ("conv2.bias".into(), self.conv2.bias.clone().into_dyn()),
            ("bn2.gamma".into(), self.bn2.gamma.clone().into_dyn()),
            ("bn2.beta".into(), self.bn2.beta.clone().into_dyn()),
            (
                "bn2.running_mean".into(),
                self.bn2.running_mean.clone().into_dyn(),
            ),
            (
                "bn2.running_var".into(),
                self.bn2.running_var.clone().into_dyn(),
            ),
            ("fc1.weight".into(), self.fc1.weight.clone().into_dyn()),
            ("fc1.bias".into(), self.fc1.bias.clone().into_dyn()),
            ("head.weight".into(), self.head.weight.clone().into_dyn()),
            ("head.bias".into(), self.head.bias.clone().into_dyn()),
        ])
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = TensorTaker::new(ck);
        let model = Classifier {
            conv1: Conv2d::new(
                t.take_dim("conv1.weight")?,
                t.take_dim("conv1.bias")?,
                1,
                2,
                PadMode::Zero,
            ),
            bn1: load_bn(&mut t, "bn1")?,
            conv2: Conv2d::new(
                t.take_dim("conv2.weight")?,
                t.take_dim("conv2.bias")?,
                1,
                2,
                PadMode::Zero,
            ),
            bn2: load_bn(&mut t, "bn2")?,
            fc1: Linear::new(t.take_dim("fc1.weight")?, t.take_dim("fc1.bias")?),
            head: Linear::new(t.take_dim("head.weight")?, t.take_dim("head.bias")?),
        };
        t.finish()?;
        Ok(model)
    }

    pub fn state_hash(&self) -> [u8; 32] {
        self.to_checkpoint().state_hash()
    }

    /// Hash of the head tensors only, for frozen-head verification.
    pub fn head_hash(&self) -> [u8; 32] {
        Checkpoint::new(vec![
            ("head.weight".into(), self.head.weight.clone().into_dyn()),
            ("head.bias".into(), self.head.bias.clone().into_dyn()),
        ])
        .state_hash()
    }
}

fn load_bn(t: &mut TensorTaker, prefix: &str) -> Result<BatchNorm2d> {
    let mut bn = BatchNorm2d::new(1);
    bn.gamma = t.take_dim(&format!("{prefix}.gamma"))?;
    bn.beta = t.take_dim(&format!("{prefix}.beta"))?;
    bn.running_mean = t.take_dim(&format!("{prefix}.running_mean"))?;
    bn.running_var = t.take_dim(&format!("{prefix}.running_var"))?;
    Ok(bn)
}

fn pool_relu(x: &Array4<f32>) -> (Array4<f32>, Array4<u8>, Array4<f32>) {
    let r = ops::relu(x);
    let (p, arg) = ops::maxpool2(&r);
    (p, arg, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_batch(b: usize, c: usize, hw: usize, seed: u64) -> Array4<f32> {
        let mut r = rng(seed);
        Array4::from_shape_fn((b, c, hw, hw), |_| r.random_range(-1.0..1.0f32))
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let mut model = Classifier::new(1, 10, 28, &mut rng(0));
        for mut p in model.param_views_mut(true) {
            p.fill(0.0);
        }
        let out = model.infer(&random_batch(3, 1, 28, 1)).unwrap();
        for row in out.probs.axis_iter(Axis(0)) {
            for &v in row {
                assert!((v - 0.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn eval_forward_is_bit_deterministic() {
        let model = Classifier::new(1, 10, 28, &mut rng(3));
        let x = random_batch(4, 1, 28, 5);
        let a = model.infer(&x).unwrap();
        let b = model.infer(&x).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.feature_map, b.feature_map);
    }

    #[test]
    fn probs_rows_sum_to_one_across_random_batches() {
        let model = Classifier::new(1, 10, 28, &mut rng(7));
        for i in 0..100 {
            let x = random_batch(2, 1, 28, 100 + i);
            let out = model.infer(&x).unwrap();
            for row in out.probs.axis_iter(Axis(0)) {
                let s: f32 = row.sum();
                assert!((s - 1.0).abs() < 1e-6, "batch {i}: sum {s}");
            }
        }
    }

    #[test]
    fn feature_map_shape_follows_contract() {
        let model = Classifier::new(1, 10, 28, &mut rng(2));
        let out = model.infer(&random_batch(2, 1, 28, 9)).unwrap();
        assert_eq!(out.feature_map.dim(), (2, 50, 7, 7));
        assert_eq!(out.pooled.dim(), (2, 500));
        assert_eq!(out.logits.dim(), (2, 10));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let model = Classifier::new(1, 10, 28, &mut rng(2));
        assert!(matches!(
            model.infer(&random_batch(2, 3, 28, 9)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut model = Classifier::new(1, 10, 28, &mut rng(4));
        // make running stats non-trivial
        let x = random_batch(4, 1, 28, 11);
        let _ = model.forward_train(&x).unwrap();
        let ck = model.to_checkpoint();
        let restored = Classifier::from_checkpoint(ck.clone()).unwrap();
        assert_eq!(ck, restored.to_checkpoint());
        assert_eq!(model.state_hash(), restored.state_hash());
    }

    #[test]
    fn eval_backward_leaves_state_unchanged() {
        let model = Classifier::new(1, 10, 28, &mut rng(6));
        let before = model.state_hash();
        let x = random_batch(4, 1, 28, 13);
        let (out, ctx) = model.forward_eval(&x).unwrap();
        let d_logits = out.probs.clone();
        let (_, dx) = model.backward(
            &ctx,
            BranchGrads {
                d_logits: Some(d_logits),
                ..Default::default()
            },
            false,
            true,
        );
        assert!(dx.unwrap().iter().all(|v| v.is_finite()));
        assert_eq!(before, model.state_hash());
    }

    #[test]
    fn full_backward_matches_finite_differences() {
        let mut model = Classifier::new(1, 4, 16, &mut rng(8));
        let x = random_batch(2, 1, 16, 17);
        let mut r = rng(99);
        let coeffs = {
            let out = model.infer(&x).unwrap();
            Array2::from_shape_fn(out.logits.dim(), |_| r.random_range(-1.0..1.0f32))
        };
        // loss through the logits only (eval mode keeps BN stats fixed)
        let loss = |m: &Classifier, x: &Array4<f32>| -> f32 {
            let out = m.infer(x).unwrap();
            (&out.logits * &coeffs).sum()
        };
        let (out, ctx) = model.forward_eval(&x).unwrap();
        let _ = out;
        let (grads, dx) = model.backward(
            &ctx,
            BranchGrads {
                d_logits: Some(coeffs.clone()),
                ..Default::default()
            },
            true,
            true,
        );
        let grads = grads.unwrap();
        let dx = dx.unwrap();
        let eps = 1e-2f32;

        for &(bi, i, j) in &[(0usize, 3usize, 3usize), (1, 10, 12)] {
            let mut xp = x.clone();
            xp[[bi, 0, i, j]] += eps;
            let mut xm = x.clone();
            xm[[bi, 0, i, j]] -= eps;
            let fd = (loss(&model, &xp) - loss(&model, &xm)) / (2.0 * eps);
            let an = dx[[bi, 0, i, j]];
            assert!((fd - an).abs() < 3e-2, "dx[{bi},0,{i},{j}]: fd {fd} vs {an}");
        }
        // one fc1 weight and one conv1 weight
        {
            let w0 = model.fc1.weight[[17, 33]];
            model.fc1.weight[[17, 33]] = w0 + eps;
            let lp = loss(&model, &x);
            model.fc1.weight[[17, 33]] = w0 - eps;
            let lm = loss(&model, &x);
            model.fc1.weight[[17, 33]] = w0;
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads.fc1_w[[17, 33]];
            assert!((fd - an).abs() < 3e-2, "fc1: fd {fd} vs {an}");
        }
        {
            let w0 = model.conv1.weight[[5, 0, 2, 2]];
            model.conv1.weight[[5, 0, 2, 2]] = w0 + eps;
            let lp = loss(&model, &x);
            model.conv1.weight[[5, 0, 2, 2]] = w0 - eps;
            let lm = loss(&model, &x);
            model.conv1.weight[[5, 0, 2, 2]] = w0;
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads.conv1_w[[5, 0, 2, 2]];
            assert!((fd - an).abs() < 3e-2, "conv1: fd {fd} vs {an}");
        }
    }
}
