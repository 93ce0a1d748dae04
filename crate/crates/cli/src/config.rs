use std::fs;
use std::path::Path;

use anyhow::Context;
use hsmae_core::training::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};

/// Settings for a run, loaded from JSON; command-line flags override fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(hsmae_core::Error::from)
            .with_context(|| format!("parsing config {}", path.display()))
    }
}
