use std::path::Path;

use anyhow::{bail, Context, Result};
use rotsiam::net::DEFAULT_RESPONSE_SCALE;
use rotsiam::{DatasetConfig, NetworkSpec, TrackerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Encoder preset. With `reference_order` set, the field counts describe a
/// network of that order and are rescaled to match its parameter count at
/// `order`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub order: usize,
    pub input_channels: usize,
    pub fields: [usize; 4],
    pub reference_order: Option<usize>,
    pub response_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            order: 4,
            input_channels: 1,
            fields: [8, 12, 16, 16],
            reference_order: None,
            response_scale: DEFAULT_RESPONSE_SCALE,
        }
    }
}

impl NetworkConfig {
    pub fn spec(&self) -> Result<NetworkSpec> {
        let reference = self.reference_order.unwrap_or(self.order);
        let mut spec = NetworkSpec::desk(reference, self.input_channels, self.fields)?;
        if reference != self.order {
            spec = spec.matched(self.order)?;
        }
        spec.response_scale = self.response_scale;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub data: DatasetConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
}

impl Config {
    /// Reads a `.toml` or `.json` file; a missing path gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)?,
            Some("json") => serde_json::from_str(&text)?,
            _ => bail!("config must be a .toml or .json file: {}", path.display()),
        };
        Ok(cfg)
    }

    /// Applies a seed to every consumer of randomness.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed.or(self.seed) {
            self.seed = Some(seed);
            self.data.seed = seed;
            self.train.seed = seed;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: Config = toml::from_str("seed = 3\n[network]\norder = 8\nreference_order = 4\n").unwrap();
        assert_eq!(cfg.network.order, 8);
        assert_eq!(cfg.train, TrainConfig::default());
        let spec = cfg.network.spec().unwrap();
        assert_eq!(spec.group.order(), 8);
        let reference = NetworkConfig::default().spec().unwrap().param_count().unwrap() as f64;
        let matched = spec.param_count().unwrap() as f64;
        assert!((matched - reference).abs() / reference < 0.02);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("[train]\nlr = 0.1\n").is_err());
        assert!(toml::from_str::<Config>("[data]\ntrain = 3\n").is_err());
    }

    #[test]
    fn seed_flag_overrides_file() {
        let cfg = Config {
            seed: Some(1),
            ..Config::default()
        }
        .with_seed(Some(9));
        assert_eq!((cfg.data.seed, cfg.train.seed), (9, 9));
    }
}
