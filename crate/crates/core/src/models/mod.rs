//! Classifier and generator architectures plus the checkpoint container.

pub mod checkpoint;
pub mod classifier;
pub mod generator;

pub use checkpoint::Checkpoint;
pub use classifier::{BranchGrads, Classifier, ClassifierGrads, ClassifierOutput};
pub use generator::Generator;
