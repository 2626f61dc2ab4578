//! Stage configuration: one `[stage.<name>]` TOML table per stage, unknown
//! keys rejected, flag overrides applied on top by the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_BASE_LR: f64 = 3e-4;

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub stage: StageTables,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StageTables {
    #[serde(rename = "make-synthetic", skip_serializing_if = "Option::is_none")]
    pub make_synthetic: Option<MakeSyntheticCfg>,
    #[serde(rename = "train-source", skip_serializing_if = "Option::is_none")]
    pub train_source: Option<TrainSourceCfg>,
    #[serde(rename = "adapt-target", skip_serializing_if = "Option::is_none")]
    pub adapt_target: Option<AdaptTargetCfg>,
    #[serde(rename = "init-generator", skip_serializing_if = "Option::is_none")]
    pub init_generator: Option<InitGeneratorCfg>,
    #[serde(rename = "train-sfit", skip_serializing_if = "Option::is_none")]
    pub train_sfit: Option<TrainSfitCfg>,
    #[serde(rename = "finetune", skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneCfg>,
    #[serde(rename = "evaluate", skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateCfg>,
    #[serde(rename = "export-images", skip_serializing_if = "Option::is_none")]
    pub export_images: Option<ExportImagesCfg>,
    #[serde(rename = "export-heatmap", skip_serializing_if = "Option::is_none")]
    pub export_heatmap: Option<ExportHeatmapCfg>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config {
            message: format!("{}: {e}", path.display()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config {
            message: format!("serialize: {e}"),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MakeSyntheticCfg {
    /// Per-domain training image count (the synthesized base holds 2x).
    pub n_train: usize,
    /// Per-domain test image count.
    pub n_test: usize,
    pub seed: u64,
    pub source_transform: String,
    pub target_transform: String,
    /// External labeled base instead of the synthesizer (IDX paths).
    pub base_train_images: Option<PathBuf>,
    pub base_train_labels: Option<PathBuf>,
    pub base_test_images: Option<PathBuf>,
    pub base_test_labels: Option<PathBuf>,
    /// Bilinear-resize an external base to this square side (e.g. 28).
    pub resize: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Default for MakeSyntheticCfg {
    fn default() -> Self {
        MakeSyntheticCfg {
            n_train: 10_000,
            n_test: 2_000,
            seed: 0,
            source_transform: "identity".into(),
            target_transform: "invert".into(),
            base_train_images: None,
            base_train_labels: None,
            base_test_images: None,
            base_test_labels: None,
            resize: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSourceCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainSourceCfg {
    fn default() -> Self {
        TrainSourceCfg {
            epochs: 5,
            batch_size: DEFAULT_BATCH_SIZE,
            base_lr: DEFAULT_BASE_LR,
            seed: 0,
            data: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptTargetCfg {
    /// "im" (source-free information maximization) or "mmd" (uses source data).
    pub method: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub entropy_weight: f64,
    pub diversity_weight: f64,
    pub mmd_weight: f64,
    /// Probe BN gamma-sign patterns with the IM objective and warm-start from
    /// the best before optimizing (IM method only).
    pub polarity_search: bool,
    /// Images in the warm-start probe slice.
    pub probe_images: usize,
    pub data: Option<PathBuf>,
    pub source_checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for AdaptTargetCfg {
    fn default() -> Self {
        AdaptTargetCfg {
            method: "im".into(),
            epochs: 5,
            batch_size: DEFAULT_BATCH_SIZE,
            base_lr: DEFAULT_BASE_LR,
            seed: 0,
            entropy_weight: 1.0,
            diversity_weight: 1.0,
            mmd_weight: 1.0,
            polarity_search: true,
            probe_images: 512,
            data: None,
            source_checkpoint: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InitGeneratorCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub id_weight: f64,
    pub content_weight: f64,
    pub data: Option<PathBuf>,
    pub source_checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for InitGeneratorCfg {
    fn default() -> Self {
        InitGeneratorCfg {
            epochs: 2,
            batch_size: DEFAULT_BATCH_SIZE,
            base_lr: DEFAULT_BASE_LR,
            seed: 0,
            id_weight: 1.0,
            content_weight: 1.0,
            data: None,
            source_checkpoint: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSfitCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub kd_temperature: f64,
    pub data: Option<PathBuf>,
    pub source_checkpoint: Option<PathBuf>,
    pub target_checkpoint: Option<PathBuf>,
    pub generator_init: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainSfitCfg {
    fn default() -> Self {
        TrainSfitCfg {
            epochs: 10,
            batch_size: DEFAULT_BATCH_SIZE,
            base_lr: DEFAULT_BASE_LR,
            seed: 0,
            weights: LossWeights::default(),
            kd_temperature: 1.0,
            data: None,
            source_checkpoint: None,
            target_checkpoint: None,
            generator_init: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub source_checkpoint: Option<PathBuf>,
    pub target_checkpoint: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for FinetuneCfg {
    fn default() -> Self {
        FinetuneCfg {
            epochs: 2,
            batch_size: DEFAULT_BATCH_SIZE,
            base_lr: DEFAULT_BASE_LR,
            seed: 0,
            data: None,
            source_checkpoint: None,
            target_checkpoint: None,
            generator: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateCfg {
    pub batch_size: usize,
    pub data: Option<PathBuf>,
    pub source_checkpoint: Option<PathBuf>,
    pub target_checkpoint: Option<PathBuf>,
    /// Absent generator means the identity mapping.
    pub generator: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for EvaluateCfg {
    fn default() -> Self {
        EvaluateCfg {
            batch_size: 64,
            data: None,
            source_checkpoint: None,
            target_checkpoint: None,
            generator: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExportImagesCfg {
    /// Images per grid row.
    pub count: usize,
    pub data: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for ExportImagesCfg {
    fn default() -> Self {
        ExportImagesCfg {
            count: 8,
            data: None,
            generator: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExportHeatmapCfg {
    pub batch_size: usize,
    /// Pixels per Gram cell in the rendered raster.
    pub zoom: usize,
    pub data: Option<PathBuf>,
    pub source_checkpoint: Option<PathBuf>,
    pub target_checkpoint: Option<PathBuf>,
    pub generator: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for ExportHeatmapCfg {
    fn default() -> Self {
        ExportHeatmapCfg {
            batch_size: 16,
            zoom: 4,
            data: None,
            source_checkpoint: None,
            target_checkpoint: None,
            generator: None,
            out: None,
        }
    }
}
