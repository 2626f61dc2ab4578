//! Training stages: source supervision, target adaptation, generator
//! initialization + SFIT, and SFDA fine-tuning. Every stage is deterministic
//! given its config: fixed seed and inputs reproduce bit-identical models.

pub mod adapt;
pub mod common;
pub mod config;
pub mod finetune;
pub mod generator;
pub mod log;
pub mod source;

pub use adapt::{adapt_target_im, adapt_target_mmd};
pub use common::accuracy;
pub use config::{
    AdaptTargetCfg, ConfigFile, EvaluateCfg, ExportHeatmapCfg, ExportImagesCfg, FinetuneCfg,
    InitGeneratorCfg, MakeSyntheticCfg, StageTables, TrainSfitCfg, TrainSourceCfg,
};
pub use finetune::finetune_target;
pub use generator::{init_generator, probe_id_loss, train_sfit};
pub use log::TrainLog;
pub use source::train_source;
