//! Optional TOML config file. Every field is optional; resolution order
//! is always flag, then config value, then built-in default.

use std::path::Path;

use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub contrastive: ContrastiveSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub remote: RemoteSection,
    /// Default backend kind (oracle, nearest-context, remote).
    #[serde(default)]
    pub backend: Option<String>,
    /// Default selection mode.
    #[serde(default)]
    pub mode: Option<String>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(rename = "c")]
    pub context_size: Option<usize>,
    #[serde(rename = "l")]
    pub lookback: Option<usize>,
    #[serde(rename = "r")]
    pub buffer: Option<usize>,
    #[serde(rename = "F")]
    pub horizon: Option<usize>,
    pub ensemble: Option<usize>,
    pub temperature: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveSection {
    #[serde(rename = "C")]
    pub candidates: Option<usize>,
    #[serde(rename = "B")]
    pub negatives: Option<usize>,
    pub scorer: Option<String>,
    pub runs: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub tau: Option<f64>,
    pub lr: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSection {
    pub model: Option<String>,
    pub base_url: Option<String>,
    pub timeout_ms: Option<u64>,
    pub max_retries: Option<u32>,
    pub backoff_base_ms: Option<u64>,
    pub backoff_cap_ms: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        toml::from_str(&content)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}
