use sfit_core::data::{pair, synth, DomainTransform, ImageSet};
use sfit_core::pipelines::{self, TrainLog};

#[test]
#[ignore]
fn adabn_hypothesis() {
    let (imgs, labels) = synth::synth_digits(4000, 0);
    let base_train = ImageSet::from_bytes(&imgs, Some(labels)).unwrap();
    let (timgs, tlabels) = synth::synth_digits(1200, 0xdead);
    let base_test = ImageSet::from_bytes(&timgs, Some(tlabels)).unwrap();
    let (st, tt) = (DomainTransform::Identity, DomainTransform::Invert);
    let (source_train, target_train) = pair::make_domain_pair(&base_train, &st, &tt, 0).unwrap();
    let (source_test, target_test) = pair::make_domain_pair(&base_test, &st, &tt, 1).unwrap();

    let cfg = pipelines::TrainSourceCfg { epochs: 3, ..Default::default() };
    let mut log = TrainLog::new("src", 0);
    let source = pipelines::train_source(&cfg, &source_train, &mut log).unwrap();
    println!("source: on src-test {:.4}, on tgt-test {:.4}",
        pipelines::accuracy(&source, &source_test, 128).unwrap(),
        pipelines::accuracy(&source, &target_test, 128).unwrap());

    // AdaBN only: run train-mode forwards to recalibrate running stats
    let mut adabn = source.clone();
    let plan = sfit_core::BatchPlan { batch_size: 64, seed: 9, shuffle: true, drop_last: true };
    let tgt_unlab = target_train.strip_labels();
    for x in tgt_unlab.batches(&plan).unwrap() {
        let _ = adabn.forward_train(&x).unwrap();
    }
    println!("after AdaBN pass: on tgt-test {:.4}",
        pipelines::accuracy(&adabn, &target_test, 128).unwrap());
}
