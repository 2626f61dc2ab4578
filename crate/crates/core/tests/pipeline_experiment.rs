use sfit_core::data::{pair, synth, DomainTransform, ImageSet};
use sfit_core::pipelines::{self, TrainLog};
use sfit_core::evaluate_branches;

fn build_pair(n_train: usize, n_test: usize, seed: u64) -> (sfit_core::DomainPair, ()) {
    let (imgs, labels) = synth::synth_digits(n_train * 2, seed);
    let base_train = ImageSet::from_bytes(&imgs, Some(labels)).unwrap();
    let (timgs, tlabels) = synth::synth_digits(n_test * 2, seed ^ 0xdead);
    let base_test = ImageSet::from_bytes(&timgs, Some(tlabels)).unwrap();
    let st = DomainTransform::Identity;
    let tt = DomainTransform::Invert;
    let (source_train, target_train) = pair::make_domain_pair(&base_train, &st, &tt, seed).unwrap();
    let (source_test, target_test) = pair::make_domain_pair(&base_test, &st, &tt, seed + 1).unwrap();
    (sfit_core::DomainPair { source_train, target_train, source_test, target_test }, ())
}

#[test]
#[ignore]
fn experiment() {
    let t0 = std::time::Instant::now();
    let (pair, _) = build_pair(3000, 600, 0);
    println!("[{:6.1}s] pair built", t0.elapsed().as_secs_f64());

    let src_cfg = pipelines::TrainSourceCfg { epochs: 3, ..Default::default() };
    let mut log = TrainLog::new("train-source", 0);
    let source = pipelines::train_source(&src_cfg, &pair.source_train, &mut log).unwrap();
    println!("[{:6.1}s] source trained", t0.elapsed().as_secs_f64());
    let acc_src_on_src = pipelines::accuracy(&source, &pair.source_test, 128).unwrap();
    let acc_src_on_tgt = pipelines::accuracy(&source, &pair.target_test, 128).unwrap();
    println!("source model: src-test {acc_src_on_src:.4}  tgt-test {acc_src_on_tgt:.4}");

    let adapt_cfg = pipelines::AdaptTargetCfg { epochs: 3, ..Default::default() };
    let mut log = TrainLog::new("adapt", 0);
    let target_model = pipelines::adapt_target_im(&adapt_cfg, &source, &pair.target_train.strip_labels(), &mut log).unwrap();
    let acc_tgt_on_tgt = pipelines::accuracy(&target_model, &pair.target_test, 128).unwrap();
    println!("[{:6.1}s] adapted (IM): tgt-test {acc_tgt_on_tgt:.4}", t0.elapsed().as_secs_f64());

    let init_cfg = pipelines::InitGeneratorCfg { epochs: 1, ..Default::default() };
    let mut log = TrainLog::new("init-gen", 0);
    let gen0 = pipelines::init_generator(&init_cfg, &source, &pair.target_train.strip_labels(), &mut log).unwrap();
    let post_id = pipelines::probe_id_loss(&gen0, &pair.target_train.strip_labels()).unwrap();
    println!("[{:6.1}s] generator init: probe id {post_id:.4}", t0.elapsed().as_secs_f64());
    let r0 = evaluate_branches(&source, &target_model, Some(&gen0), &pair.target_test, 128).unwrap();
    println!("after init: src_on_gen {:.4} (src_on_tgt {:.4}, tgt_on_tgt {:.4})",
        r0.acc_source_on_generated, r0.acc_source_on_target, r0.acc_target_on_target);

    let sfit_cfg = pipelines::TrainSfitCfg { epochs: 3, ..Default::default() };
    let mut log = TrainLog::new("sfit", 0);
    let gen = pipelines::train_sfit(&sfit_cfg, &source, &target_model, gen0, &pair.target_train.strip_labels(), &mut log).unwrap();
    println!("[{:6.1}s] sfit done", t0.elapsed().as_secs_f64());
    let kd = log.series("kd"); let rp = log.series("rp");
    println!("kd first/last: {:.4} -> {:.4}   rp: {:.4} -> {:.4}",
        kd.first().unwrap(), kd.last().unwrap(), rp.first().unwrap(), rp.last().unwrap());

    let report = evaluate_branches(&source, &target_model, Some(&gen), &pair.target_test, 128).unwrap();
    println!("final report:\n{}", report.to_json());

    let ft_cfg = pipelines::FinetuneCfg { epochs: 1, ..Default::default() };
    let mut log = TrainLog::new("finetune", 0);
    let tuned = pipelines::finetune_target(&ft_cfg, &source, &target_model, &gen, &pair.target_train.strip_labels(), &mut log).unwrap();
    let acc_tuned = pipelines::accuracy(&tuned, &pair.target_test, 128).unwrap();
    println!("[{:6.1}s] finetuned: {acc_tgt_on_tgt:.4} -> {acc_tuned:.4}", t0.elapsed().as_secs_f64());
}
