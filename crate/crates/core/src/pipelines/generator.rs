//! Generator stages: transparent-filter initialization and the main
//! two-branch training loop that closes the gap between the
//! generated-image-source-model and target-image-target-model branches.

use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::UnlabeledImages;
use crate::error::{Error, Result};
use crate::losses::{self, LossTerms};
use crate::models::{BranchGrads, Classifier, Generator};
use crate::nn::{cosine_lr, Adam, AdamConfig};

use super::common::{derive_seed, epoch_plan, to_f32_2, to_f32_4, to_f64_2, to_f64_4, STREAM_INIT};
use super::config::{InitGeneratorCfg, TrainSfitCfg};
use super::log::TrainLog;

/// Mean |generated - original| over a deterministic probe slice, reported as
/// the transparency measure of an initialized generator.
pub fn probe_id_loss(generator: &Generator, images: &UnlabeledImages) -> Result<f64> {
    let take = images.n().min(256);
    let idx: Vec<usize> = (0..take).collect();
    let x = images.gather(&idx);
    let (y, _) = generator.forward(&x)?;
    losses::id_loss(to_f64_4(y.view()).view(), to_f64_4(x.view()).view())
}

/// Train a fresh generator to behave as a transparent filter: L1 pixel loss
/// plus L2 distance between source-model pooled features of generated and
/// original images.
pub fn init_generator(
    cfg: &InitGeneratorCfg,
    source: &Classifier,
    target_train: &UnlabeledImages,
    log: &mut TrainLog,
) -> Result<Generator> {
    let channels = source.in_channels();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT, 1));
    let mut generator = Generator::new(channels, &mut rng);
    let source_hash = source.state_hash();

    let steps_per_epoch = target_train.n() / cfg.batch_size;
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::for_params(AdamConfig::default(), &generator.param_views());

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let plan = epoch_plan(cfg.batch_size, cfg.seed, epoch);
        for x in target_train.batches(&plan)? {
            let (generated, gctx) = generator.forward(&x)?;

            let (id_v, d_id) =
                losses::id_loss_grad(to_f64_4(generated.view()).view(), to_f64_4(x.view()).view())?;

            let (out_gen, ctx_gen) = source.forward_eval(&generated)?;
            let out_orig = source.infer(&x)?;
            let (content_v, d_pooled) = losses::content_loss_grad(
                to_f64_2(out_gen.pooled.view()).view(),
                to_f64_2(out_orig.pooled.view()).view(),
            )?;

            let total = cfg.id_weight * id_v + cfg.content_weight * content_v;
            if !total.is_finite() {
                return Err(Error::Config {
                    message: format!("generator init diverged at step {step}"),
                });
            }

            let (_, dx_content) = source.backward(
                &ctx_gen,
                BranchGrads {
                    d_pooled: Some(to_f32_2(&(&d_pooled * cfg.content_weight))),
                    ..Default::default()
                },
                false,
                true,
            );
            let mut d_generated = dx_content.expect("input grad requested");
            d_generated += &to_f32_4(&(&d_id * cfg.id_weight));

            let grads = generator.backward(&gctx, &d_generated);
            let lr = cosine_lr(cfg.base_lr, step, total_steps);
            adam.step(lr, &mut generator.param_views_mut(), &grads);
            log.log(step as u64, "id", id_v);
            log.log(step as u64, "content", content_v);
            step += 1;
        }
        if source.state_hash() != source_hash {
            return Err(Error::FrozenModelViolation {
                what: "source model".into(),
            });
        }
    }

    log.set_summary("post_init_id_loss", probe_id_loss(&generator, target_train)?);
    Ok(generator)
}

/// Running stats of the source model's BN layers as f64 pairs, in the order
/// the classifier reports batch statistics.
fn source_running_stats(source: &Classifier) -> Vec<(Array1<f64>, Array1<f64>)> {
    vec![
        (
            source.bn1.running_mean.mapv(f64::from),
            source.bn1.running_var.mapv(f64::from),
        ),
        (
            source.bn2.running_mean.mapv(f64::from),
            source.bn2.running_var.mapv(f64::from),
        ),
    ]
}

fn softmax_with_temperature(logits: &Array2<f64>, t: f64) -> Array2<f64> {
    let mut p = logits.mapv(|v| v / t);
    for mut row in p.axis_iter_mut(ndarray::Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// One SFIT step's loss terms and the gradient contributions entering the
/// source branch. Factored out so variant configurations share one code path.
#[allow(clippy::type_complexity)]
fn sfit_terms(
    cfg: &TrainSfitCfg,
    source: &Classifier,
    out_s: &crate::models::ClassifierOutput,
    out_t: &crate::models::ClassifierOutput,
) -> Result<(LossTerms, BranchGrads)> {
    let w = &cfg.weights;
    let mut terms = LossTerms::default();
    let mut d_logits: Option<Array2<f32>> = None;
    let mut d_fm = Array4::<f64>::zeros(out_s.feature_map.dim());
    let mut any_fm = false;
    let mut d_bn_stats = None;

    let t = cfg.kd_temperature;
    if w.w_kd != 0.0 {
        let p_t = softmax_with_temperature(&to_f64_2(out_t.logits.view()), t);
        let p_s = softmax_with_temperature(&to_f64_2(out_s.logits.view()), t);
        let (kd, d) = losses::kd_grad_wrt_logits(p_t.view(), p_s.view())?;
        terms.kd = kd;
        d_logits = Some(to_f32_2(&(&d * (w.w_kd / t))));
    }

    let fm_t = to_f64_4(out_t.feature_map.view());
    let fm_s = to_f64_4(out_s.feature_map.view());
    if w.w_rp != 0.0 {
        let (rp, d) = losses::rp_loss_batch(fm_t.view(), fm_s.view())?;
        terms.rp = rp;
        d_fm += &(&d * w.w_rp);
        any_fm = true;
    }
    if w.w_style != 0.0 {
        let (style, d) = losses::style_loss_batch(fm_t.view(), fm_s.view())?;
        terms.style = style;
        d_fm += &(&d * w.w_style);
        any_fm = true;
    }
    if w.w_batch != 0.0 {
        let (batch, d) = losses::batch_similarity_loss_grad(fm_t.view(), fm_s.view())?;
        terms.batch = batch;
        d_fm += &(&d * w.w_batch);
        any_fm = true;
    }
    if w.w_pixel != 0.0 {
        let (pixel, d) = losses::pixel_similarity_loss_grad(fm_t.view(), fm_s.view())?;
        terms.pixel = pixel;
        d_fm += &(&d * w.w_pixel);
        any_fm = true;
    }
    if w.w_bn != 0.0 {
        let batch_stats: Vec<(Array1<f64>, Array1<f64>)> = out_s
            .bn_batch_stats
            .iter()
            .map(|(m, v)| (m.mapv(f64::from), v.mapv(f64::from)))
            .collect();
        let running = source_running_stats(source);
        let (bn, grads) = losses::bn_stats_loss_grad(&batch_stats, &running)?;
        terms.bn = bn;
        d_bn_stats = Some(
            grads
                .into_iter()
                .map(|(m, v)| {
                    (
                        m.mapv(|x| (x * w.w_bn) as f32),
                        v.mapv(|x| (x * w.w_bn) as f32),
                    )
                })
                .collect::<Vec<_>>(),
        );
    }

    Ok((
        terms,
        BranchGrads {
            d_logits,
            d_pooled: None,
            d_feature_map: any_fm.then(|| to_f32_4(&d_fm)),
            d_bn_stats,
        },
    ))
}

/// Train the generator against two frozen classifiers: the target branch sees
/// original images under the target model, the source branch sees generated
/// images under the source model, and the weighted loss pulls the branches
/// together. Both classifiers are hash-verified at every epoch boundary.
pub fn train_sfit(
    cfg: &TrainSfitCfg,
    source: &Classifier,
    target_model: &Classifier,
    generator_init: Generator,
    target_train: &UnlabeledImages,
    log: &mut TrainLog,
) -> Result<Generator> {
    let mut generator = generator_init;
    let source_hash = source.state_hash();
    let target_hash = target_model.state_hash();

    let steps_per_epoch = target_train.n() / cfg.batch_size;
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::for_params(AdamConfig::default(), &generator.param_views());

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let plan = epoch_plan(cfg.batch_size, cfg.seed, epoch);
        for x in target_train.batches(&plan)? {
            let (generated, gctx) = generator.forward(&x)?;
            let out_t = target_model.infer(&x)?;
            let (out_s, ctx_s) = source.forward_eval(&generated)?;

            let (terms, branch_grads) = sfit_terms(cfg, source, &out_s, &out_t)?;
            let total = losses::total_sfit_loss(&cfg.weights, &terms);
            if !total.is_finite() {
                return Err(Error::Config {
                    message: format!("SFIT loss diverged at step {step}"),
                });
            }

            let (_, dx) = source.backward(&ctx_s, branch_grads, false, true);
            let grads = generator.backward(&gctx, &dx.expect("input grad requested"));
            let lr = cosine_lr(cfg.base_lr, step, total_steps);
            adam.step(lr, &mut generator.param_views_mut(), &grads);

            log.log(step as u64, "kd", terms.kd);
            log.log(step as u64, "rp", terms.rp);
            if cfg.weights.w_style != 0.0 {
                log.log(step as u64, "style", terms.style);
            }
            if cfg.weights.w_batch != 0.0 {
                log.log(step as u64, "batch", terms.batch);
            }
            if cfg.weights.w_pixel != 0.0 {
                log.log(step as u64, "pixel", terms.pixel);
            }
            if cfg.weights.w_bn != 0.0 {
                log.log(step as u64, "bn", terms.bn);
            }
            log.log(step as u64, "total", total);
            step += 1;
        }
        if source.state_hash() != source_hash {
            return Err(Error::FrozenModelViolation {
                what: "source model".into(),
            });
        }
        if target_model.state_hash() != target_hash {
            return Err(Error::FrozenModelViolation {
                what: "target model".into(),
            });
        }
    }
    Ok(generator)
}
