//! Source-free image translation (SFIT) laboratory.
//!
//! Trains a residual generator to translate target-domain images toward the
//! source style, guided only by a frozen source classifier and a frozen
//! domain-adapted target classifier, so that the two branches
//! (generated-image-source-model vs. target-image-target-model) agree.
//! Includes the supporting stages: supervised source training, source-free
//! target adaptation, generator initialization, SFDA fine-tuning, branch-gap
//! evaluation, and image/heatmap export.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod pipelines;
pub mod selftest;

pub use data::{BatchPlan, DomainPair, DomainTransform, ImageSet, PairManifest, UnlabeledImages};
pub use error::{Error, Result};
pub use eval::{evaluate_branches, BranchReport};
pub use losses::LossWeights;
pub use models::{Checkpoint, Classifier, Generator};
pub use pipelines::TrainLog;
