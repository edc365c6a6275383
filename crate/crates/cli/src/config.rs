//! Training run settings read from a TOML file and overridden by flags.

use serde::{Deserialize, Serialize};
use ver_core::train::TrainConfig;
use ver_core::vgka::{AdaptorConfig, Guidance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Adaptor shape apart from the widths, which come from the feature store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptorSection {
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width; `4·D` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    pub guidance: Guidance,
}

impl Default for AdaptorSection {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 16,
            d_ff: None,
            guidance: Guidance::Both,
        }
    }
}

impl AdaptorSection {
    pub fn resolve(&self, d_model: usize, d_text: usize) -> AdaptorConfig {
        let base = AdaptorConfig::new(d_model, d_text)
            .with_layers(self.layers)
            .with_heads(self.heads)
            .with_guidance(self.guidance);
        match self.d_ff {
            Some(ff) => base.with_d_ff(ff),
            None => base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub precision: Precision,
    pub adaptor: AdaptorSection,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nbatch_sise = 4\n").is_err());
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
    }

    #[test]
    fn dump_round_trips() {
        let mut c = RunConfig::from_toml(
            "threads = 2\n[adaptor]\nheads = 4\n[train]\nlr = 0.003\nbatch_size = 32\n",
        )
        .unwrap();
        c.train.seed = 9;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.adaptor.resolve(64, 96).d_ff, 256);
    }
}
