//! TOML run configuration. Every section has explicit defaults; unknown keys
//! are rejected at parse time and semantic problems are reported together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{LandscapeOptions, DEFAULT_CHANNELS};
use crate::data::{load_cifar10, resize_bilinear, synth_split, Dataset};
use crate::error::{Error, Result};
use crate::models::{SurgeryOptions, ZOO};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the CIFAR-10 binary batches.
    pub cifar_dir: PathBuf,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_classes: usize,
    pub synthetic_seed: u64,
    /// Bilinear resize of every image to this side length; 0 keeps 32x32.
    pub resize: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            cifar_dir: PathBuf::from("data/cifar-10-batches-bin"),
            synthetic_train: 2000,
            synthetic_test: 500,
            synthetic_classes: 10,
            synthetic_seed: 0,
            resize: 0,
        }
    }
}

impl DataConfig {
    /// `(train, test)`; the test split is normalized with training statistics.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.source {
            DataSource::Synthetic => {
                synth_split(self.synthetic_train, self.synthetic_test, self.synthetic_classes, 32, self.synthetic_seed)?
            }
            DataSource::Cifar10 => load_cifar10(&self.cifar_dir)?,
        };
        if self.resize == 0 || self.resize == 32 {
            return Ok((train, test));
        }
        let train = Dataset::new(resize_bilinear(&train.images, self.resize), train.labels, train.split, train.classes)?;
        let test = Dataset::new(resize_bilinear(&test.images, self.resize), test.labels, test.split, test.classes)?
            .with_stats(train.stats.clone());
        Ok((train, test))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Matrix order for connection-degree and KL matrices.
    pub channels: usize,
    /// Restrict analyses to one layer; empty means every eligible layer.
    pub layer: String,
    pub landscape: LandscapeOptions,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { channels: DEFAULT_CHANNELS, layer: String::new(), landscape: LandscapeOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: String,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub surgery: SurgeryOptions,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "tiny_dw".into(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            surgery: SurgeryOptions::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml(&text)
    }

    /// The complete configuration with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if !ZOO.contains(&self.model.as_str()) {
            p.push(format!("model `{}` is not one of {}", self.model, ZOO.join(", ")));
        }
        p.extend(self.train.problems().into_iter().map(|m| format!("train: {m}")));
        let d = &self.data;
        if d.source == DataSource::Synthetic {
            if d.synthetic_classes < 2 {
                p.push("data: synthetic_classes must be at least 2".into());
            }
            if d.synthetic_train < d.synthetic_classes || d.synthetic_test < d.synthetic_classes {
                p.push("data: every synthetic split needs at least one sample per class".into());
            }
        }
        if d.resize != 0 && d.resize < 8 {
            p.push(format!("data: resize must be 0 (off) or at least 8, got {}", d.resize));
        }
        let s = &self.surgery;
        if s.map_kernel == 0 || s.map_kernel % 2 == 0 {
            p.push(format!("surgery: map_kernel must be odd, got {}", s.map_kernel));
        }
        let a = &self.analysis;
        if a.channels == 0 {
            p.push("analysis: channels must be positive".into());
        }
        let l = &a.landscape;
        if l.resolution < 3 || l.resolution % 2 == 0 {
            p.push(format!("analysis.landscape: resolution must be odd and at least 3, got {}", l.resolution));
        }
        if !(l.span.is_finite() && l.span > 0.0) {
            p.push(format!("analysis.landscape: span must be positive, got {}", l.span));
        }
        if l.samples == 0 {
            p.push("analysis.landscape: samples must be positive".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}
