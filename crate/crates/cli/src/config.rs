//! JSON run configuration shared by `train`, `ablate` and `params`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use volage::training::TrainConfig;
use volage::{Error, ModelConfig, Result};

/// Everything a run needs besides file paths. Unknown keys are rejected at
/// every level; missing keys take their defaults.
///
/// ```json
/// {
///   "model": { "conv_channels": [4, 8], "input_shape": [32, 32, 32], "flatten_features": null },
///   "train": { "epochs": 30, "learning_rate": 0.001 },
///   "test_fraction": 0.2
/// }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Held-out share per age bin; 0 trains on everything.
    pub test_fraction: f64,
    /// Age-bin width in years for the stratified split.
    pub bin_width: f64,
    /// Z-score each volume at load.
    pub normalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            test_fraction: 0.2,
            bin_width: 3.0,
            normalize: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction must be in [0, 1), got {}", self.test_fraction)));
        }
        if !(self.bin_width > 0.0) {
            return Err(Error::Config(format!("bin_width must be positive, got {}", self.bin_width)));
        }
        Ok(())
    }
}
