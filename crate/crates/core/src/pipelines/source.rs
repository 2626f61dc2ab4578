//! Supervised source training: cross entropy, Adam, cosine decay.

use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::models::{BranchGrads, Classifier};
use crate::nn::{cosine_lr, ops, Adam, AdamConfig};

use super::common::{accuracy, derive_seed, epoch_plan, STREAM_INIT};
use super::config::TrainSourceCfg;
use super::log::TrainLog;

pub fn train_source(
    cfg: &TrainSourceCfg,
    source_train: &ImageSet,
    log: &mut TrainLog,
) -> Result<Classifier> {
    let labels = source_train.labels().ok_or(Error::UnlabeledData)?;
    let num_classes = source_train.num_classes()?;
    if num_classes < 2 {
        return Err(Error::Config {
            message: format!("need at least 2 classes, found {num_classes}"),
        });
    }
    let (h, w) = source_train.hw();
    if h != w {
        return Err(Error::shape(format!("classifier expects square images, got {h}x{w}")));
    }
    let _ = labels;

    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT, 0));
    let mut model = Classifier::new(source_train.channels(), num_classes, h, &mut rng);

    let steps_per_epoch = source_train.n() / cfg.batch_size;
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::for_params(AdamConfig::default(), &model.param_views(true));

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let plan = epoch_plan(cfg.batch_size, cfg.seed, epoch);
        for batch in source_train.batches(&plan)? {
            let batch_labels = batch.labels.as_ref().expect("labeled set");
            let (out, ctx) = model.forward_train(&batch.images)?;
            let (ce, d_logits) = ops::cross_entropy(&out.logits, batch_labels);
            if !ce.is_finite() {
                return Err(Error::Config {
                    message: format!("cross entropy diverged at step {step}"),
                });
            }
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
                &mut model.param_views_mut(true),
                &grads.expect("param grads requested").into_vec(true),
            );
            log.log(step as u64, "cross_entropy", ce);
            step += 1;
        }
        let train_acc = accuracy(&model, source_train, 256)?;
        log.log(step.saturating_sub(1) as u64, "train_accuracy", train_acc);
    }

    let final_acc = accuracy(&model, source_train, 256)?;
    log.set_summary("final_train_accuracy", final_acc);
    log.set_summary("num_classes", num_classes);
    Ok(model)
}
