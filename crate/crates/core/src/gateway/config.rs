//! Endpoint table for the external services, loaded from TOML or JSON with
//! `AF_<KIND>_URL` / `AF_<KIND>_TOKEN` environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CallPolicy, ProviderKind};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("endpoint {kind}: {message}")]
    Invalid { kind: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireProtocol {
    /// The engine's own `/v1/<kind>` JSON contract.
    #[default]
    Native,
    /// OpenAI-style `/v1/chat/completions`; reasoning and judge only.
    OpenaiChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderEndpoint {
    pub kind: ProviderKind,
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
    /// Resolved token; never written back out.
    #[serde(skip)]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default)]
    pub protocol: WireProtocol,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    2
}
fn default_concurrency() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    250
}

impl ProviderEndpoint {
    pub fn new(kind: ProviderKind, base_url: impl Into<String>) -> Self {
        Self {
            kind,
            base_url: base_url.into(),
            token_env: None,
            token: None,
            model: None,
            protocol: WireProtocol::Native,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_concurrency: default_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |message: &str| ConfigError::Invalid {
            kind: self.kind.to_string(),
            message: message.to_string(),
        };
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(invalid("timeout_secs must be positive"));
        }
        if self.max_concurrency < 1 {
            return Err(invalid("max_concurrency must be at least 1"));
        }
        if self.base_url.trim().is_empty() {
            return Err(invalid("base_url is empty"));
        }
        if self.protocol == WireProtocol::OpenaiChat
            && !matches!(self.kind, ProviderKind::Reasoning | ProviderKind::Judge)
        {
            return Err(invalid(
                "openai_chat protocol only applies to reasoning and judge",
            ));
        }
        Ok(())
    }

    pub fn policy(&self) -> CallPolicy {
        CallPolicy {
            timeout: Duration::from_secs_f64(self.timeout_secs),
            max_retries: self.max_retries,
            max_concurrency: self.max_concurrency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockSettings {
    #[serde(default)]
    pub seed: u64,
    /// Optional mock-world file with planted vectors and reasoning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default)]
    pub endpoints: Vec<ProviderEndpoint>,
    /// When present, every kind is served by the deterministic mock world.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockSettings>,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoints: Vec::new(),
            mock: None,
            backoff_ms: default_backoff_ms(),
        }
    }
}

impl GatewayConfig {
    pub fn mock(seed: u64) -> Self {
        Self {
            mock: Some(MockSettings { seed, world: None }),
            ..Default::default()
        }
    }

    /// Parses `.toml` or `.json` by extension. Relative mock-world paths
    /// resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let read_err = |message: String| ConfigError::Read {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let mut config: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| read_err(e.to_string()))?
        };
        if let (Some(mock), Some(dir)) = (config.mock.as_mut(), path.parent()) {
            if let Some(world) = mock.world.as_mut() {
                if world.is_relative() {
                    *world = dir.join(&*world);
                }
            }
        }
        Ok(config)
    }

    /// Applies `AF_<KIND>_URL` and `AF_<KIND>_TOKEN` overrides, then resolves
    /// `token_env` references. `lookup` is normally `std::env::var`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for kind in ProviderKind::ALL {
            let key = kind.env_key();
            if let Some(url) = lookup(&format!("AF_{key}_URL")) {
                match self.endpoints.iter_mut().find(|e| e.kind == kind) {
                    Some(e) => e.base_url = url,
                    None => self.endpoints.push(ProviderEndpoint::new(kind, url)),
                }
            }
            if let Some(e) = self.endpoints.iter_mut().find(|e| e.kind == kind) {
                e.token = lookup(&format!("AF_{key}_TOKEN"))
                    .or_else(|| e.token_env.as_deref().and_then(&lookup));
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut seen = BTreeMap::new();
        for e in &self.endpoints {
            e.validate()?;
            if seen.insert(e.kind, ()).is_some() {
                return Err(ConfigError::Invalid {
                    kind: e.kind.to_string(),
                    message: "configured twice".into(),
                });
            }
        }
        Ok(())
    }

    pub fn endpoint(&self, kind: ProviderKind) -> Option<&ProviderEndpoint> {
        self.endpoints.iter().find(|e| e.kind == kind)
    }

    pub fn backoff(&self) -> Duration {
        Duration::from_millis(self.backoff_ms)
    }
}
