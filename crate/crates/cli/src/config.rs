use std::path::Path;

use anyhow::Context;
use iprrn::data::DegradationSpec;
use iprrn::metrics::MetricSettings;
use iprrn::trainer::TrainConfig;
use iprrn::ModelConfig;
use serde::{Deserialize, Serialize};

/// Everything a `--config` file may set. Missing sections take defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub degradation: DegradationSpec,
    pub metrics: MetricSettings,
}

impl RunConfig {
    /// Parses TOML; errors carry the offending line and column.
    pub fn parse(text: &str, origin: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!("{origin}: {e}"))
    }

    pub fn load(path: &Path) -> anyhow::Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let text = std::str::from_utf8(&bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
        Ok((Self::parse(text, &path.display().to_string())?, bytes))
    }

    /// `--seed` drives both weight initialisation and data order.
    pub fn apply_seed(&mut self, seed: u64) {
        self.model.init_seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> iprrn::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.degradation.validate()?;
        if self.degradation.scale != self.model.scale {
            return Err(iprrn::Error::Config(format!(
                "degradation scale {} differs from model scale {}",
                self.degradation.scale, self.model.scale
            )));
        }
        Ok(())
    }
}

/// 1-based line of the first `key = ...` assignment in `text`, for
/// errors raised after parsing, once spans are gone.
pub fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|line| {
        let line = line.trim_start();
        line.strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}
