//! The run configuration file: one JSON document covering every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationSpec;
use crate::data::{generate_synthetic, load_dataset, Dataset, SyntheticSpec, DEFAULT_TRAIN_FRACTION};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::probe::ProbeConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Generated in memory from the spec.
    Synthetic(SyntheticSpec),
    /// A directory written by `synth`, or one sub-directory of PNGs per class.
    Folder {
        root: String,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
}

fn default_train_fraction() -> f64 {
    DEFAULT_TRAIN_FRACTION
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationSpec,
    pub probe: ProbeConfig,
    pub dataset: DatasetConfig,
    /// Run directory; `None` means a timestamped directory named after the seed.
    pub output_dir: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_path_to_error::Error<serde_json::Error>> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.augmentation.validate()?;
        if self.probe.learning_rate <= 0.0 || !self.probe.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "probe.learning_rate must be finite and > 0, got {}",
                self.probe.learning_rate
            )));
        }
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            if s.image_size != self.encoder.image_size || s.channels != self.encoder.channels {
                return Err(Error::Config(format!(
                    "dataset.synthetic produces {}-channel {}px images but encoder expects {}-channel {}px",
                    s.channels, s.image_size, self.encoder.channels, self.encoder.image_size
                )));
            }
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetConfig::Synthetic(spec) => generate_synthetic(spec),
            DatasetConfig::Folder {
                root,
                train_fraction,
                split_seed,
            } => load_dataset(
                Path::new(root),
                self.encoder.image_size,
                self.encoder.channels,
                *train_fraction,
                *split_seed,
            ),
        }
    }
}
