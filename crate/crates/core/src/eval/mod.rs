//! Branch-gap evaluation and raster exports.

pub mod export;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::data::{BatchPlan, ImageSet};
use crate::error::{Error, Result};
use crate::models::{Classifier, Generator};
use crate::nn::ops;

pub use export::{export_gram_heatmap, export_grid, gram_diff_matrix, mean_gram_diff};

/// Accuracies of the three branches on the target test set, with per-class
/// breakdowns and the gap-closure summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchReport {
    pub acc_source_on_target: f64,
    pub acc_target_on_target: f64,
    pub acc_source_on_generated: f64,
    pub per_class_source_on_target: Vec<f64>,
    pub per_class_target_on_target: Vec<f64>,
    pub per_class_source_on_generated: Vec<f64>,
    /// Knowledge gap: target-model accuracy minus source-model accuracy on
    /// target test images.
    pub gap: f64,
    /// Fraction of the gap recovered by feeding generated images to the
    /// source model; reported only when the gap exceeds 0.01.
    pub gap_closure: Option<f64>,
}

impl BranchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `class,acc` rows for the generated-image-source-model branch.
    pub fn per_class_csv(&self) -> String {
        let mut text = String::from("class,acc\n");
        for (class, acc) in self.per_class_source_on_generated.iter().enumerate() {
            text.push_str(&format!("{class},{acc}\n"));
        }
        text
    }
}

struct ClassCounter {
    correct: Vec<usize>,
    total: Vec<usize>,
}

impl ClassCounter {
    fn new(classes: usize) -> Self {
        ClassCounter {
            correct: vec![0; classes],
            total: vec![0; classes],
        }
    }

    fn add(&mut self, pred: usize, label: usize) {
        self.total[label] += 1;
        if pred == label {
            self.correct[label] += 1;
        }
    }

    fn overall(&self) -> f64 {
        let c: usize = self.correct.iter().sum();
        let t: usize = self.total.iter().sum();
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    }

    fn per_class(&self) -> Vec<f64> {
        self.correct
            .iter()
            .zip(self.total.iter())
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect()
    }
}

/// Evaluate the three branches in eval mode. A missing generator means the
/// identity mapping, so the generated branch coincides with the source branch.
pub fn evaluate_branches(
    source: &Classifier,
    target_model: &Classifier,
    generator: Option<&Generator>,
    target_test: &ImageSet,
    batch_size: usize,
) -> Result<BranchReport> {
    if target_test.labels().is_none() {
        return Err(Error::UnlabeledData);
    }
    let classes = source.num_classes();
    let mut src_on_tgt = ClassCounter::new(classes);
    let mut tgt_on_tgt = ClassCounter::new(classes);
    let mut src_on_gen = ClassCounter::new(classes);

    let plan = BatchPlan {
        batch_size: batch_size.min(target_test.n()),
        seed: 0,
        shuffle: false,
        drop_last: false,
    };
    for batch in target_test.batches(&plan)? {
        let labels = batch.labels.as_ref().expect("labeled test set");
        let generated: Array4<f32> = match generator {
            Some(g) => g.forward(&batch.images)?.0,
            None => batch.images.clone(),
        };
        let pred_src = ops::argmax_rows(&source.infer(&batch.images)?.probs);
        let pred_tgt = ops::argmax_rows(&target_model.infer(&batch.images)?.probs);
        let pred_gen = ops::argmax_rows(&source.infer(&generated)?.probs);
        for (i, &label) in labels.iter().enumerate() {
            src_on_tgt.add(pred_src[i], label as usize);
            tgt_on_tgt.add(pred_tgt[i], label as usize);
            src_on_gen.add(pred_gen[i], label as usize);
        }
    }

    let acc_source_on_target = src_on_tgt.overall();
    let acc_target_on_target = tgt_on_tgt.overall();
    let acc_source_on_generated = src_on_gen.overall();
    let gap = acc_target_on_target - acc_source_on_target;
    let gap_closure =
        (gap > 0.01).then(|| (acc_source_on_generated - acc_source_on_target) / gap);

    Ok(BranchReport {
        acc_source_on_target,
        acc_target_on_target,
        acc_source_on_generated,
        per_class_source_on_target: src_on_tgt.per_class(),
        per_class_target_on_target: tgt_on_tgt.per_class(),
        per_class_source_on_generated: src_on_gen.per_class(),
        gap,
        gap_closure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn labeled_set(n: usize) -> ImageSet {
        let images = Array4::from_shape_fn((n, 1, 16, 16), |(i, _, y, x)| {
            (((i * 31 + y * 5 + x) % 251) as f32) / 127.5 - 1.0
        });
        let labels = Array1::from_vec((0..n).map(|i| (i % 4) as u8).collect());
        ImageSet::new(images, Some(labels)).unwrap()
    }

    #[test]
    fn identity_generator_matches_source_branch() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let source = Classifier::new(1, 4, 16, &mut rng);
        let target = Classifier::new(1, 4, 16, &mut rng);
        let set = labeled_set(24);
        let report = evaluate_branches(&source, &target, None, &set, 8).unwrap();
        assert_eq!(report.acc_source_on_target, report.acc_source_on_generated);
        assert_eq!(
            report.per_class_source_on_target,
            report.per_class_source_on_generated
        );
    }

    #[test]
    fn gap_closure_is_one_when_generated_matches_target_accuracy() {
        let report = BranchReport {
            acc_source_on_target: 0.5,
            acc_target_on_target: 0.9,
            acc_source_on_generated: 0.9,
            per_class_source_on_target: vec![],
            per_class_target_on_target: vec![],
            per_class_source_on_generated: vec![],
            gap: 0.4,
            gap_closure: Some((0.9 - 0.5) / 0.4),
        };
        assert!((report.gap_closure.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unlabeled_test_set_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let source = Classifier::new(1, 4, 16, &mut rng);
        let unlabeled = ImageSet::new(Array4::zeros((4, 1, 16, 16)), None).unwrap();
        assert!(matches!(
            evaluate_branches(&source, &source, None, &unlabeled, 4),
            Err(Error::UnlabeledData)
        ));
    }

    #[test]
    fn report_json_has_gap_closure_field() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let source = Classifier::new(1, 4, 16, &mut rng);
        let target = Classifier::new(1, 4, 16, &mut rng);
        let set = labeled_set(16);
        let report = evaluate_branches(&source, &target, None, &set, 8).unwrap();
        let json = report.to_json();
        assert!(json.contains("gap_closure"));
        let parsed: BranchReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.acc_source_on_target, report.acc_source_on_target);
    }
}
