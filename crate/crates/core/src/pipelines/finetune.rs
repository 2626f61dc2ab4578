//! SFDA fine-tuning of the target model: diversity loss on all samples plus
//! agreement-gated pseudo-label cross entropy, with the generator and source
//! model frozen and the classifier head untouched.

use crate::data::UnlabeledImages;
use crate::error::{Error, Result};
use crate::losses;
use crate::models::{BranchGrads, Classifier, Generator};
use crate::nn::{cosine_lr, ops, Adam, AdamConfig};

use super::common::{epoch_plan, softmax_vjp, to_f32_2, to_f64_2};
use super::config::FinetuneCfg;
use super::log::TrainLog;

pub fn finetune_target(
    cfg: &FinetuneCfg,
    source: &Classifier,
    target_model: &Classifier,
    generator: &Generator,
    target_train: &UnlabeledImages,
    log: &mut TrainLog,
) -> Result<Classifier> {
    let mut model = target_model.clone();
    let head_before = model.head_hash();
    let source_hash = source.state_hash();
    let generator_hash = generator.state_hash();

    let steps_per_epoch = target_train.n() / cfg.batch_size;
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::for_params(AdamConfig::default(), &model.param_views(false));

    let mut agree_seen = 0usize;
    let mut samples_seen = 0usize;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let plan = epoch_plan(cfg.batch_size, cfg.seed, epoch);
        for x in target_train.batches(&plan)? {
            let (generated, _) = generator.forward(&x)?;
            let out_src = source.infer(&generated)?;
            let (out_tgt, ctx) = model.forward_train(&x)?;

            let y_s: Vec<usize> = ops::argmax_rows(&out_src.probs).to_vec();
            let y_t: Vec<usize> = ops::argmax_rows(&out_tgt.probs).to_vec();

            let probs = to_f64_2(out_tgt.probs.view());
            let (div, d_div) = losses::diversity_loss_grad(probs.view())?;
            let (pseudo, agree, d_pseudo) =
                losses::pseudo_label_loss_batch(probs.view(), &y_s, &y_t)?;
            let total = div + pseudo;
            if !total.is_finite() {
                return Err(Error::Config {
                    message: format!("fine-tuning loss diverged at step {step}"),
                });
            }

            let d_probs = &d_div + &d_pseudo;
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

            agree_seen += agree;
            samples_seen += x.dim().0;
            log.log(step as u64, "diversity", div);
            log.log(step as u64, "pseudo", pseudo);
            log.log(step as u64, "agreement_rate", agree as f64 / x.dim().0 as f64);
            step += 1;
        }
        if source.state_hash() != source_hash {
            return Err(Error::FrozenModelViolation {
                what: "source model".into(),
            });
        }
        if generator.state_hash() != generator_hash {
            return Err(Error::FrozenModelViolation {
                what: "generator".into(),
            });
        }
    }

    if model.head_hash() != head_before {
        return Err(Error::FrozenModelViolation {
            what: "classifier head".into(),
        });
    }
    if samples_seen > 0 {
        log.set_summary("agreement_rate", agree_seen as f64 / samples_seen as f64);
    }
    Ok(model)
}
