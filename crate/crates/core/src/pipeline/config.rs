//! Run configuration, named presets and the TOML config-file format.
//!
//! A config file holds any subset of a [`Preset`]'s fields; keys that are
//! present replace the preset's values:
//!
//! ```toml
//! base = "desk"          # optional, preset to start from
//! [data]
//! clips = 2000
//! [frames]
//! k = 4
//! epochs = 3
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ballsim::{ClipSpec, DatasetConfig, SimParams};
use crate::error::{Error, IoContext, Result};
use crate::framegan::{FrameDiscSpec, FrameGenSpec};
use crate::ganloss::{GenLossMode, ProjectionGeom, Stage};
use crate::videogan::{VideoDiscSpec, VideoGenSpec};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub projection: ProjectionGeom,
    pub frame_gen: FrameGenSpec,
    pub frame_disc: FrameDiscSpec,
    pub video_gen: VideoGenSpec,
    pub video_disc: VideoDiscSpec,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// `alpha = 0.99`, `eps = 1e-8`, no momentum.
    #[default]
    RmsProp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub stage: Stage,
    pub dataset: PathBuf,
    /// Frame-stage checkpoint; required for the video stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_checkpoint: Option<PathBuf>,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    pub seed: u64,
    pub gen_loss_mode: GenLossMode,
    pub arch: ArchConfig,
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.k == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "K, epochs and batch size must be >= 1 (K={}, epochs={}, batch={})",
                self.k, self.epochs, self.batch_size
            )));
        }
        if self.stage == Stage::Video && self.frame_checkpoint.is_none() {
            return Err(Error::Config("video stage needs a frame-generator checkpoint".into()));
        }
        self.arch.frame_gen.validate()?;
        self.arch.video_gen.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPreset {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Length of the frame-training index.
    pub index_frames: usize,
    pub sim: SimParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePreset {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPreset {
    pub n_videos: usize,
    pub isomap_k: usize,
    pub n_prior: usize,
    pub n_interp_pairs: usize,
    pub n_strips: usize,
    pub grid_samples: usize,
}

impl Default for EvalPreset {
    fn default() -> Self {
        Self { n_videos: 30, isomap_k: 10, n_prior: 60, n_interp_pairs: 2, n_strips: 3, grid_samples: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub seed: u64,
    pub data: DataPreset,
    pub frames: StagePreset,
    pub video: StagePreset,
    pub gen_loss_mode: GenLossMode,
    pub arch: ArchConfig,
    pub eval: EvalPreset,
}

pub const PRESET_NAMES: [&str; 3] = ["full", "desk", "ci"];

impl Preset {
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            seed: 10,
            data: DataPreset { clips: 100_000, frames: 30, height: 32, width: 32, index_frames: 100_000, sim: SimParams::default() },
            frames: StagePreset { k: 48, epochs: 50, batch_size: 64, learning_rate: 3e-4 },
            video: StagePreset { k: 16, epochs: 15, batch_size: 8, learning_rate: 2e-4 },
            gen_loss_mode: GenLossMode::Mean,
            arch: ArchConfig::default(),
            eval: EvalPreset::default(),
        }
    }

    pub fn desk() -> Self {
        let mut p = Self::full();
        p.name = "desk".into();
        p.data.clips = 10_000;
        p.data.index_frames = 10_000;
        p.frames.k = 8;
        p.frames.epochs = 10;
        p.video.k = 4;
        p.video.epochs = 5;
        p
    }

    /// Reduced run sized for a single CPU core inside the test suite.
    pub fn ci() -> Self {
        let mut p = Self::desk();
        p.name = "ci".into();
        p.data.clips = 1_000;
        p.data.index_frames = 12_800;
        p.frames.epochs = 1;
        p.video.epochs = 3;
        p
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "full" | "paper" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "ci" => Ok(Self::ci()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected one of {PRESET_NAMES:?})"))),
        }
    }

    /// Applies the keys of a TOML document on top of this preset.
    pub fn with_overrides(&self, toml_text: &str) -> Result<Self> {
        let overrides: toml::Table = toml_text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, overrides);
        base.try_into().map_err(|e: toml::de::Error| Error::Config(format!("config file: {e}")))
    }

    /// Loads a config file; its optional `base` key names the starting preset.
    pub fn from_file(path: &Path, default_base: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = match table.remove("base") {
            Some(toml::Value::String(s)) => s,
            Some(other) => return Err(Error::Config(format!("base must be a preset name, got {other}"))),
            None => default_base.to_string(),
        };
        Self::named(&base)?.with_overrides(&table.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("presets serialize")
    }

    pub fn dataset_config(&self, n_balls: usize) -> DatasetConfig {
        DatasetConfig {
            n_clips: self.data.clips,
            clip: ClipSpec {
                n_balls,
                n_frames: self.data.frames,
                height: self.data.height,
                width: self.data.width,
                sim: self.data.sim,
            },
            base_seed: self.seed,
            index_frames: self.data.index_frames,
        }
    }

    fn arch(&self) -> ArchConfig {
        let mut arch = self.arch.clone();
        arch.frame_gen.height = self.data.height;
        arch.frame_gen.width = self.data.width;
        arch.video_gen.steps = self.data.frames;
        arch
    }

    pub fn frames_config(&self, dataset: &Path) -> TrainRunConfig {
        TrainRunConfig {
            stage: Stage::Frames,
            dataset: dataset.to_path_buf(),
            frame_checkpoint: None,
            k: self.frames.k,
            epochs: self.frames.epochs,
            batch_size: self.frames.batch_size,
            learning_rate: self.frames.learning_rate,
            optimizer: Optimizer::RmsProp,
            seed: self.seed,
            gen_loss_mode: self.gen_loss_mode,
            arch: self.arch(),
        }
    }

    pub fn video_config(&self, dataset: &Path, frame_checkpoint: &Path) -> TrainRunConfig {
        TrainRunConfig {
            stage: Stage::Video,
            dataset: dataset.to_path_buf(),
            frame_checkpoint: Some(frame_checkpoint.to_path_buf()),
            k: self.video.k,
            epochs: self.video.epochs,
            batch_size: self.video.batch_size,
            learning_rate: self.video.learning_rate,
            optimizer: Optimizer::RmsProp,
            seed: self.seed,
            gen_loss_mode: self.gen_loss_mode,
            arch: self.arch(),
        }
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
