//! Source-free (information maximization) and MMD-based target adaptation.
//! Only the feature extractor is updated; the classifier head stays
//! bit-identical to the source checkpoint.

use ndarray::{concatenate, Axis};

use crate::data::{BatchPlan, ImageSet, UnlabeledImages};
use crate::error::{Error, Result};
use crate::losses;
use crate::models::{BranchGrads, Classifier};
use crate::nn::{cosine_lr, ops, Adam, AdamConfig};

use super::common::{epoch_plan, softmax_vjp, to_f32_2, to_f64_2};
use super::config::AdaptTargetCfg;
use super::log::TrainLog;

/// The IM objective (mean per-sample entropy plus diversity) of a model on a
/// probe set, label-free. Used both for logging and for warm-start selection.
fn im_objective(model: &Classifier, probe: &ndarray::Array4<f32>) -> Result<f64> {
    let out = model.infer(probe)?;
    let probs = to_f64_2(out.probs.view());
    let (ent, _) = losses::mean_entropy_grad(probs.view())?;
    let (div, _) = losses::diversity_loss_grad(probs.view())?;
    Ok(ent + div)
}

/// Recalibrate BN running statistics on target batches (train-mode forwards,
/// no parameter updates). A raised momentum makes the stats converge to the
/// target domain within a few passes.
fn recalibrate_bn(model: &mut Classifier, images: &UnlabeledImages, passes: usize) -> Result<()> {
    let plan = BatchPlan {
        batch_size: 64.min(images.n()),
        seed: 0,
        shuffle: false,
        drop_last: false,
    };
    let saved = (model.bn1.momentum, model.bn2.momentum);
    model.bn1.momentum = 0.3;
    model.bn2.momentum = 0.3;
    for _ in 0..passes {
        for x in images.batches(&plan)? {
            let _ = model.forward_train(&x)?;
        }
    }
    model.bn1.momentum = saved.0;
    model.bn2.momentum = saved.1;
    Ok(())
}

/// With a frozen head, a severe gap can leave the source model at chance on
/// target data, where entropy minimization locks in an arbitrary class
/// binding. Feature-polarity gaps (e.g. inverted images negate every pre-BN
/// activation) are recoverable exactly by flipping BN scale signs, so probe
/// the four per-layer gamma-sign patterns with the IM objective itself and
/// start from the best one. Entirely label- and source-data-free.
fn polarity_warm_start(
    source: &Classifier,
    target_train: &UnlabeledImages,
    probe_images: usize,
    log: &mut TrainLog,
) -> Result<Classifier> {
    let take = probe_images.min(target_train.n());
    let idx: Vec<usize> = (0..take).collect();
    let probe_set = target_train.gather(&idx);
    let probe_view = UnlabeledImages::from_array(probe_set.view());

    let mut best: Option<(f64, usize, Classifier)> = None;
    for (ci, (flip1, flip2)) in [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .enumerate()
    {
        let mut candidate = source.clone();
        if flip1 {
            candidate.bn1.gamma.mapv_inplace(|g| -g);
        }
        if flip2 {
            candidate.bn2.gamma.mapv_inplace(|g| -g);
        }
        recalibrate_bn(&mut candidate, &probe_view, 3)?;
        let objective = im_objective(&candidate, &probe_set)?;
        let better = match &best {
            Some((obj, _, _)) => objective < *obj - 1e-9,
            None => true,
        };
        if better {
            best = Some((objective, ci, candidate));
        }
    }
    let (objective, chosen, model) = best.expect("four candidates evaluated");
    log.set_summary("polarity_candidate", chosen);
    log.set_summary("polarity_objective", objective);
    Ok(model)
}

/// Information-maximization adaptation: minimize per-sample entropy plus the
/// diversity term, on unlabeled target images only. Starts from the best
/// BN-polarity candidate under the same objective (see
/// [`polarity_warm_start`]), then recalibrates BN statistics while training.
pub fn adapt_target_im(
    cfg: &AdaptTargetCfg,
    source: &Classifier,
    target_train: &UnlabeledImages,
    log: &mut TrainLog,
) -> Result<Classifier> {
    let mut model = if cfg.polarity_search && cfg.epochs > 0 {
        polarity_warm_start(source, target_train, cfg.probe_images, log)?
    } else {
        source.clone()
    };
    let head_before = source.head_hash();

    let steps_per_epoch = target_train.n() / cfg.batch_size;
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::for_params(AdamConfig::default(), &model.param_views(false));

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let plan = epoch_plan(cfg.batch_size, cfg.seed, epoch);
        for images in target_train.batches(&plan)? {
            let (out, ctx) = model.forward_train(&images)?;
            let probs = to_f64_2(out.probs.view());
            let (ent, d_ent) = losses::mean_entropy_grad(probs.view())?;
            let (div, d_div) = losses::diversity_loss_grad(probs.view())?;
            let total = cfg.entropy_weight * ent + cfg.diversity_weight * div;
            if !total.is_finite() {
                return Err(Error::Config {
                    message: format!("IM objective diverged at step {step}"),
                });
            }
            let d_probs = &d_ent * cfg.entropy_weight + &d_div * cfg.diversity_weight;
            let d_logits = to_f32_2(&softmax_vjp(&probs, &d_probs));
            let (grads, _) = model.backward(
                &ctx,
                BranchGrads {
                    d_logits: Some(d_logits),
                    ..Default::default()
                },
                true,
                false,
            );
            let lr = cosine_lr(cfg.base_lr, step, total_steps);
            adam.step(
                lr,
                &mut model.param_views_mut(false),
                &grads.expect("param grads requested").into_vec(false),
            );
            log.log(step as u64, "entropy", ent);
            log.log(step as u64, "diversity", div);
            log.log(step as u64, "im_total", total);
            step += 1;
        }
    }

    if model.head_hash() != head_before {
        return Err(Error::FrozenModelViolation {
            what: "classifier head".into(),
        });
    }
    Ok(model)
}

/// MMD adaptation baseline (not source-free): classification loss on source
/// batches plus second-order polynomial-kernel MMD between the pooled
/// features of the two domains, over a concatenated batch so BN statistics
/// see both. With `mmd_weight == 0` the target stream is skipped entirely and
/// this is continued source training.
pub fn adapt_target_mmd(
    cfg: &AdaptTargetCfg,
    source: &Classifier,
    source_train: &ImageSet,
    target_train: &UnlabeledImages,
    log: &mut TrainLog,
) -> Result<Classifier> {
    if source.num_classes() < source_train.num_classes()? {
        return Err(Error::HeadMismatch {
            context: format!(
                "head has {} classes, source data has {}",
                source.num_classes(),
                source_train.num_classes()?
            ),
        });
    }
    let mut model = source.clone();
    let head_before = model.head_hash();

    let steps_per_epoch = (source_train.n() / cfg.batch_size).min(if cfg.mmd_weight == 0.0 {
        usize::MAX
    } else {
        target_train.n() / cfg.batch_size
    });
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::for_params(AdamConfig::default(), &model.param_views(false));

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let src_plan = epoch_plan(cfg.batch_size, cfg.seed, epoch);
        let tgt_plan = epoch_plan(cfg.batch_size, cfg.seed.wrapping_add(101), epoch);
        let mut src_batches = source_train.batches(&src_plan)?;
        let mut tgt_batches = target_train.batches(&tgt_plan)?;
        for _ in 0..steps_per_epoch {
            let src = src_batches.next().expect("planned step count");
            let src_labels = src.labels.as_ref().expect("labeled source");
            let b = src.images.dim().0;

            let (total, ce, mmd, grads) = if cfg.mmd_weight == 0.0 {
                let (out, ctx) = model.forward_train(&src.images)?;
                let (ce, d_logits) = ops::cross_entropy(&out.logits, src_labels);
                let (grads, _) = model.backward(
                    &ctx,
                    BranchGrads {
                        d_logits: Some(d_logits),
                        ..Default::default()
                    },
                    true,
                    false,
                );
                (ce, ce, 0.0, grads)
            } else {
                let tgt = tgt_batches.next().expect("planned step count");
                let joint = concatenate(Axis(0), &[src.images.view(), tgt.view()])
                    .expect("matching image dims");
                let (out, ctx) = model.forward_train(&joint)?;

                let logits_src = out.logits.slice(ndarray::s![..b, ..]).to_owned();
                let (ce, d_logits_src) = ops::cross_entropy(&logits_src, src_labels);

                let pooled = to_f64_2(out.pooled.view());
                let pooled_src = pooled.slice(ndarray::s![..b, ..]).to_owned();
                let pooled_tgt = pooled.slice(ndarray::s![b.., ..]).to_owned();
                let (mmd, d_src, d_tgt) =
                    losses::mmd_poly2_mean_grad(pooled_src.view(), pooled_tgt.view())?;

                let mut d_logits = ndarray::Array2::<f32>::zeros(out.logits.dim());
                d_logits.slice_mut(ndarray::s![..b, ..]).assign(&d_logits_src);
                let mut d_pooled = ndarray::Array2::<f64>::zeros(pooled.dim());
                d_pooled
                    .slice_mut(ndarray::s![..b, ..])
                    .assign(&(&d_src * cfg.mmd_weight));
                d_pooled
                    .slice_mut(ndarray::s![b.., ..])
                    .assign(&(&d_tgt * cfg.mmd_weight));

                let (grads, _) = model.backward(
                    &ctx,
                    BranchGrads {
                        d_logits: Some(d_logits),
                        d_pooled: Some(to_f32_2(&d_pooled)),
                        ..Default::default()
                    },
                    true,
                    false,
                );
                (ce + cfg.mmd_weight * mmd, ce, mmd, grads)
            };

            if !total.is_finite() {
                return Err(Error::Config {
                    message: format!("MMD objective diverged at step {step}"),
                });
            }
            let lr = cosine_lr(cfg.base_lr, step, total_steps);
            adam.step(
                lr,
                &mut model.param_views_mut(false),
                &grads.expect("param grads requested").into_vec(false),
            );
            log.log(step as u64, "cross_entropy", ce);
            log.log(step as u64, "mmd", mmd);
            log.log(step as u64, "mmd_total", total);
            step += 1;
        }
    }

    if model.head_hash() != head_before {
        return Err(Error::FrozenModelViolation {
            what: "classifier head".into(),
        });
    }
    Ok(model)
}
