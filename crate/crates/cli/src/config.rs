//! Pipeline configuration file and gateway construction.

use std::path::Path;
use std::sync::Arc;

use cardforge_core::enrich::EnrichConfig;
use cardforge_core::extract::ExtractionConfig;
use cardforge_core::gateway::{Gateway, GatewayConfig, MockBackend, API_KEY_ENV};
use cardforge_core::judge::JudgeConfig;
use cardforge_core::pool::PoolConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One JSON file holding every tunable; each section falls back to its
/// defaults when absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub gateway: GatewayConfig,
    pub extraction: ExtractionConfig,
    pub enrichment: EnrichConfig,
    pub pool: PoolConfig,
    pub judge: JudgeConfig,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub r_max: Option<u32>,
    pub alpha: Option<f64>,
    pub top_k: Option<usize>,
    pub rounds: Option<u32>,
}

impl PipelineConfig {
    /// Reads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(r) = o.r_max {
            self.extraction.r_max = r;
        }
        if let Some(a) = o.alpha {
            self.enrichment.alpha = a;
        }
        if let Some(k) = o.top_k {
            self.enrichment.top_k = k;
        }
        if let Some(r) = o.rounds {
            self.judge.rounds = r;
        }
        self
    }
}

/// A scripted gateway when `mock_script` is given, otherwise a live one
/// keyed from the environment. The scripted gateway never opens a socket.
pub fn build_gateway(config: &GatewayConfig, mock_script: Option<&Path>) -> Result<Gateway, CliError> {
    if let Some(path) = mock_script {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read mock script {}: {e}", path.display())))?;
        let backend = MockBackend::from_jsonl(&text)
            .map_err(|e| CliError::input(format!("mock script {}: {e}", path.display())))?;
        return Ok(Gateway::mock(Arc::new(backend)));
    }
    let key = std::env::var(API_KEY_ENV).ok();
    Gateway::from_config(config, key).map_err(|e| CliError::config(e.to_string()))
}
