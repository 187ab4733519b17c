//! Run configuration: one JSON document covering model, data, training,
//! search and the baseline comparison. Missing sections take defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::SearchConfig;
use crate::comparison::BaselineProtocol;
use crate::data::{self, Dataset, Split, SynthShape};
use crate::error::{Error, Result};
use crate::model::{LayerSpec, ModelConfig};
use crate::training::{LossConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic {
        classes: usize,
        train_count: usize,
        test_count: usize,
        difficulty: f32,
        #[serde(default)]
        shape: SynthShape,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
    Cifar {
        train: Vec<PathBuf>,
        test: PathBuf,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            classes: 10,
            train_count: 4000,
            test_count: 1000,
            difficulty: 0.6,
            shape: SynthShape::default(),
        }
    }
}

impl DataConfig {
    /// Loads the train and test sets. Synthetic sets are drawn from `seed`
    /// (train) and `seed + 1` (test).
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Synthetic {
                classes,
                train_count,
                test_count,
                difficulty,
                shape,
            } => Ok((
                data::synth_dataset_with(*shape, seed, *classes, *train_count, *difficulty)?,
                data::synth_dataset_with(*shape, seed.wrapping_add(1), *classes, *test_count, *difficulty)?
                    .with_split(Split::Test),
            )),
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                num_classes,
            } => {
                let mut train = data::load_idx(train_images, train_labels)?;
                let mut test = data::load_idx(test_images, test_labels)?.with_split(Split::Test);
                let m = num_classes.unwrap_or(train.num_classes().max(test.num_classes()));
                train = train.with_num_classes(m)?;
                test = test.with_num_classes(m)?;
                Ok((train, test))
            }
            DataConfig::Cifar { train, test } => {
                let mut parts = Vec::new();
                for p in train {
                    parts.push(data::load_cifar_binary(p)?);
                }
                let first = parts.first().ok_or(Error::Empty("cifar training file list"))?;
                let shape = first.image_shape();
                let mut pixels = Vec::new();
                let mut labels = Vec::new();
                for d in &parts {
                    for i in 0..d.len() {
                        pixels.extend_from_slice(d.pixels(i));
                        labels.push(d.label(i));
                    }
                }
                Ok((
                    Dataset::new(shape, pixels, labels, 10)?,
                    data::load_cifar_binary(test)?.with_split(Split::Test),
                ))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub search: SearchConfig,
    pub baseline: BaselineProtocol,
}

/// Four-conv network for 1x16x16 inputs and ten classes.
pub fn desk_model(num_classes: usize) -> ModelConfig {
    ModelConfig {
        input_shape: [1, 16, 16],
        num_classes,
        num_exits: 4,
        backbone: vec![
            LayerSpec::conv(32, 3, 1, 1),
            LayerSpec::pool(2, 2),
            LayerSpec::conv(64, 3, 1, 1),
            LayerSpec::pool(2, 2),
            LayerSpec::conv(96, 3, 1, 1),
            LayerSpec::conv(128, 3, 1, 1),
        ],
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: desk_model(10),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            search: SearchConfig::default(),
            baseline: BaselineProtocol::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Replaces the run seed and the training seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.search.validate()?;
        if let DataConfig::Synthetic { classes, shape, .. } = &self.data {
            if *classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "data has {classes} classes, model {}",
                    self.model.num_classes
                )));
            }
            let s = [shape.channels, shape.height, shape.width];
            if s != self.model.input_shape {
                return Err(Error::Config(format!(
                    "synthetic images are {s:?}, model expects {:?}",
                    self.model.input_shape
                )));
            }
        }
        Ok(())
    }
}
