use std::path::Path;

use exchanger::data::SynthConfig;
use exchanger::scaling::{Encoder, TimingConfig};
use exchanger::train::{ModelConfig, TrainConfig};
use exchanger::ExchangerConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub synth: SynthConfig,
    /// Pixel-set samples; grid samples are set by `synth.n_grids`.
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            n_samples: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchRunConfig {
    pub exchanger: ExchangerConfig,
    pub t_list: Vec<usize>,
    pub encoders: Vec<Encoder>,
    pub timing: TimingConfig,
}

impl Default for BenchRunConfig {
    fn default() -> Self {
        Self {
            exchanger: ExchangerConfig::default(),
            t_list: vec![64, 128, 256, 512, 1024, 2048, 4096],
            encoders: vec![Encoder::Exchanger, Encoder::SelfAttention],
            timing: TimingConfig::default(),
        }
    }
}

/// Reads a JSON config, or the defaults when no path is given.
pub fn load<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C, CliError> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
