use sfit_core::data::{synth, ImageSet};
use sfit_core::pipelines::{self, TrainLog};

#[test]
#[ignore]
fn diagnose_source_training() {
    let (imgs, labels) = synth::synth_digits(1000, 7);
    let train = ImageSet::from_bytes(&imgs, Some(labels)).unwrap();
    let cfg = pipelines::TrainSourceCfg { epochs: 2, ..Default::default() };
    let mut log = TrainLog::new("diag", 0);
    let model = pipelines::train_source(&cfg, &train, &mut log).unwrap();
    let ce = log.series("cross_entropy");
    println!("CE: start {:.4} mid {:.4} end {:.4}", ce[0], ce[ce.len()/2], ce[ce.len()-1]);
    let eval_acc = pipelines::accuracy(&model, &train, 128).unwrap();
    println!("eval-mode accuracy: {eval_acc:.4}");

    // train-mode accuracy: forward_train predictions on a few batches
    let mut model2 = model.clone();
    let plan = sfit_core::BatchPlan { batch_size: 100, seed: 0, shuffle: false, drop_last: false };
    let mut correct = 0; let mut total = 0;
    for batch in train.batches(&plan).unwrap() {
        let (out, _) = model2.forward_train(&batch.images).unwrap();
        let pred = sfit_core::nn::ops::argmax_rows(&out.probs);
        for (p, &l) in pred.iter().zip(batch.labels.as_ref().unwrap().iter()) {
            if *p == l as usize { correct += 1; }
            total += 1;
        }
        if total >= 300 { break; }
    }
    println!("train-mode accuracy: {:.4}", correct as f64 / total as f64);
    println!("bn1 running_mean[0..4]: {:?}", &model.bn1.running_mean.as_slice().unwrap()[0..4]);
    println!("bn1 running_var[0..4]: {:?}", &model.bn1.running_var.as_slice().unwrap()[0..4]);
    println!("bn1 gamma[0..4]: {:?}", &model.bn1.gamma.as_slice().unwrap()[0..4]);
}
