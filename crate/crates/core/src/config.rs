//! One experiment document aggregating every sub-configuration, loadable
//! from JSON or TOML. Validation runs before any work starts and reports
//! the failing field path; the config hash is recorded in every artifact
//! manifest.

use crate::adversarial::DiscriminatorSchedule;
use crate::diffusion::SampleMode;
use crate::error::{Error, Result};
use crate::generator::{PairedGeneratorConfig, SkipFusion, Variant};
use crate::segmentation::SegConfig;
use crate::selection::SelectionStrategy;
use crate::superres::SRConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Toy,
    Dir,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory with `images/` and `masks/` (kind = dir).
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Optional separate held-out evaluation set (kind = dir).
    #[serde(default)]
    pub test_root: Option<PathBuf>,
    /// Procedural scene count (kind = toy).
    #[serde(default = "default_toy_count")]
    pub toy_count: usize,
    /// Extra held-out procedural scenes for downstream evaluation.
    #[serde(default = "default_toy_test")]
    pub toy_test: usize,
    /// Rendered (high-resolution) scene size; the generator trains at half.
    #[serde(default = "default_toy_size")]
    pub toy_size: usize,
}

fn default_toy_count() -> usize {
    600
}

fn default_toy_test() -> usize {
    128
}

fn default_toy_size() -> usize {
    32
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Toy,
            root: None,
            test_root: None,
            toy_count: default_toy_count(),
            toy_test: default_toy_test(),
            toy_size: default_toy_size(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: SelectionStrategy,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_score_samples")]
    pub n_samples: usize,
    pub score_mode: SampleMode,
    /// 0 means the full schedule.
    #[serde(default)]
    pub score_steps: usize,
}

fn default_bins() -> usize {
    256
}

fn default_score_samples() -> usize {
    64
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            strategy: SelectionStrategy::MinMeanJsd,
            bins: default_bins(),
            n_samples: default_score_samples(),
            score_mode: SampleMode::Ddpm,
            score_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleConfig {
    pub count: usize,
    pub mode: SampleMode,
    pub steps: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { count: 500, mode: SampleMode::Ddim, steps: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_root: PathBuf,
    pub dataset: DatasetConfig,
    pub generator: PairedGeneratorConfig,
    pub train: TrainConfig,
    pub discriminator: DiscriminatorSchedule,
    pub sr: SRConfig,
    /// Overrides for SR training; defaults to `train` with SR's step count.
    #[serde(default)]
    pub sr_train: Option<TrainConfig>,
    pub segmentation: SegConfig,
    /// Fine-tuning epochs on real pairs after synthetic-only training;
    /// zero disables the phase.
    #[serde(default)]
    pub finetune_epochs: usize,
    pub selection: SelectionConfig,
    pub sample: SampleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            output_root: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            generator: PairedGeneratorConfig::default(),
            train: TrainConfig::default(),
            discriminator: DiscriminatorSchedule::default(),
            sr: SRConfig::default(),
            sr_train: None,
            segmentation: SegConfig::default(),
            finetune_epochs: 0,
            selection: SelectionConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

fn at(path: &str, e: Error) -> Error {
    Error::Config { path: path.to_string(), msg: e.to_string() }
}

impl ExperimentConfig {
    /// A small, fast toy-scale configuration (16x16 diffusion, 32x32 SR).
    pub fn toy(name: &str, out: &Path) -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.name = name.to_string();
        cfg.output_root = out.to_path_buf();
        cfg.generator = PairedGeneratorConfig {
            variant: Variant::Concat,
            skip_fusion: SkipFusion::ScaleU,
            base_channels: 8,
            depth: 2,
            attention_heads: 2,
            image_channels: 3,
            input_size: 16,
            time_embed_dim: 16,
            blocks_per_level: 2,
        };
        cfg.train = TrainConfig {
            batch_size: 16,
            lr: 0.00021,
            epochs: 30,
            t_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.05,
            adv_weight: 0.25,
            use_discriminator: false,
            crop_size: 16,
            train_size: 16,
            split_ratio: 0.8,
            seed: 0,
            steps_per_epoch: None,
            checkpoint_every: None,
            grad_clip: None,
            augment: true,
        };
        cfg.discriminator = DiscriminatorSchedule {
            t_total: 200,
            sigma: 20.0,
            alpha_epochs: 2.0,
            i0: 20,
            priority_until_epoch: 20,
        };
        cfg.sr = SRConfig {
            low_size: 16,
            high_size: 32,
            steps_train: 200,
            steps_infer: 25,
            infer_mode: SampleMode::Ddim,
            beta_start: 1e-4,
            beta_end: 0.05,
            image_channels: 3,
            base_channels: 8,
            depth: 2,
            time_embed_dim: 16,
        };
        cfg.segmentation = SegConfig {
            encoder_widths: vec![8, 16, 32],
            lr: 0.05,
            momentum: 0.0,
            epochs: 20,
            batch_size: 16,
            image_channels: 3,
        };
        cfg.selection = SelectionConfig {
            strategy: SelectionStrategy::MinMeanJsd,
            bins: 64,
            n_samples: 64,
            score_mode: SampleMode::Ddim,
            score_steps: 25,
        };
        cfg.sample = SampleConfig { count: 500, mode: SampleMode::Ddim, steps: 50 };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(at("name", Error::invalid("must be non-empty")));
        }
        self.generator.validate().map_err(|e| at("generator", e))?;
        self.train.validate().map_err(|e| at("train", e))?;
        self.sr.validate().map_err(|e| at("sr", e))?;
        if let Some(st) = &self.sr_train {
            st.validate().map_err(|e| at("sr_train", e))?;
        }
        self.segmentation.validate().map_err(|e| at("segmentation", e))?;
        if self.generator.input_size != self.train.train_size {
            return Err(at(
                "generator.input_size",
                Error::invalid(format!(
                    "must equal train.train_size ({} != {})",
                    self.generator.input_size, self.train.train_size
                )),
            ));
        }
        if self.sr.low_size != self.generator.input_size {
            return Err(at(
                "sr.low_size",
                Error::invalid(format!(
                    "must equal generator.input_size ({} != {})",
                    self.sr.low_size, self.generator.input_size
                )),
            ));
        }
        match self.dataset.kind {
            DatasetKind::Dir => {
                if self.dataset.root.is_none() {
                    return Err(at("dataset.root", Error::invalid("required for kind = dir")));
                }
            }
            DatasetKind::Toy => {
                if self.dataset.toy_count < 2 {
                    return Err(at("dataset.toy_count", Error::invalid("need at least 2 scenes")));
                }
                if self.dataset.toy_size != self.sr.high_size {
                    return Err(at(
                        "dataset.toy_size",
                        Error::invalid(format!(
                            "must equal sr.high_size ({} != {})",
                            self.dataset.toy_size, self.sr.high_size
                        )),
                    ));
                }
            }
        }
        if self.sample.count == 0 || self.sample.steps == 0 {
            return Err(at("sample", Error::invalid("count and steps must be positive")));
        }
        if self.selection.bins < 2 {
            return Err(at("selection.bins", Error::invalid("bins must be >= 2")));
        }
        Ok(())
    }

    /// Effective training config for the SR model.
    pub fn sr_train_config(&self) -> TrainConfig {
        match &self.sr_train {
            Some(cfg) => cfg.clone(),
            None => {
                let mut cfg = self.train.clone();
                cfg.t_steps = self.sr.steps_train;
                cfg.beta_start = self.sr.beta_start;
                cfg.beta_end = self.sr.beta_end;
                cfg.crop_size = self.sr.high_size;
                cfg.train_size = self.sr.high_size;
                cfg
            }
        }
    }

    pub fn hash(&self) -> String {
        crate::train::hash_json(self)
    }

    /// Load from `.json` or `.toml` by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let cfg: ExperimentConfig = match path.extension().and_then(|s| s.to_str()) {
            Some("json") => serde_json::from_str(&body)?,
            Some("toml") => {
                toml::from_str(&body).map_err(|e| Error::Serialization(e.to_string()))?
            }
            other => {
                return Err(Error::invalid(format!(
                    "config must be .json or .toml, got {other:?}"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = match path.extension().and_then(|s| s.to_str()) {
            Some("json") => serde_json::to_string_pretty(self)?,
            Some("toml") => {
                toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?
            }
            other => {
                return Err(Error::invalid(format!(
                    "config must be .json or .toml, got {other:?}"
                )))
            }
        };
        std::fs::write(path, body).map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn toy_config_validates_and_round_trips() {
        let dir = tempdir().unwrap();
        let cfg = ExperimentConfig::toy("t", dir.path());
        cfg.validate().unwrap();
        for ext in ["json", "toml"] {
            let path = dir.path().join(format!("cfg.{ext}"));
            cfg.save(&path).unwrap();
            let back = ExperimentConfig::load(&path).unwrap();
            assert_eq!(back.hash(), cfg.hash(), "{ext} round trip changes hash");
        }
    }

    #[test]
    fn validation_reports_field_paths() {
        let dir = tempdir().unwrap();
        let mut cfg = ExperimentConfig::toy("t", dir.path());
        cfg.sr.low_size = 8;
        cfg.sr.high_size = 16;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("sr.low_size"), "{err}");

        let mut cfg = ExperimentConfig::toy("t", dir.path());
        cfg.dataset.kind = DatasetKind::Dir;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("dataset.root"), "{err}");
    }

    #[test]
    fn rejects_unknown_extension() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.yaml");
        std::fs::write(&path, "{}").unwrap();
        assert!(ExperimentConfig::load(&path).is_err());
    }
}
