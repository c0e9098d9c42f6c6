//! `albumfill.toml`: where the dataset and runs live, how to reach the model
//! services, and the service's own settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use albumfill_core::compose::CompositionPolicy;
use albumfill_core::engine::DEFAULT_K;
use albumfill_core::gateway::config::{GatewayConfig, ProviderEndpoint};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_FILE: &str = "albumfill.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthMode {
    #[default]
    None,
    Bearer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuthConfig {
    pub mode: AuthMode,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    #[serde(skip)]
    pub token: Option<String>,
}

impl Default for AuthConfig {
    fn default() -> Self {
        Self {
            mode: AuthMode::None,
            token_env: "AF_SERVICE_TOKEN".into(),
            token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub listen: String,
    /// Directory holding `manifest.json` and `embeddings.bin`.
    pub dataset: PathBuf,
    pub runs: PathBuf,
    pub k: usize,
    pub compose: CompositionPolicy,
    pub seed: u64,
    pub concurrency: usize,
    /// Run directory that service queries are journaled under.
    pub service_run: String,
    pub request_timeout_secs: f64,
    pub shutdown_grace_secs: f64,
    pub auth: AuthConfig,
    pub gateway: GatewayConfig,
    /// Named judge endpoints selectable with `judge --judge-endpoint`.
    pub judges: BTreeMap<String, ProviderEndpoint>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            dataset: PathBuf::from("."),
            runs: PathBuf::from("runs"),
            k: DEFAULT_K,
            compose: CompositionPolicy::default(),
            seed: 0,
            concurrency: 4,
            service_run: "service".into(),
            request_timeout_secs: 120.0,
            shutdown_grace_secs: 30.0,
            auth: AuthConfig::default(),
            gateway: GatewayConfig::default(),
            judges: BTreeMap::new(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ServiceConfig {
    /// Reads a config file. Relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut config: Self = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.rebase(base);
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        rebase(base, &mut self.dataset);
        rebase(base, &mut self.runs);
        if let Some(world) = self.gateway.mock.as_mut().and_then(|m| m.world.as_mut()) {
            rebase(base, world);
        }
    }

    /// `AF_LISTEN`, `AF_DATASET` and `AF_RUNS`, the gateway's per-kind
    /// overrides, and the service token.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(v) = lookup("AF_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = lookup("AF_DATASET") {
            self.dataset = v.into();
        }
        if let Some(v) = lookup("AF_RUNS") {
            self.runs = v.into();
        }
        self.gateway.apply_env(&lookup);
        for e in self.judges.values_mut() {
            e.token = e.token_env.as_deref().and_then(&lookup);
        }
        self.auth.token = lookup(&self.auth.token_env);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.k == 0 {
            return Err(CliError::config("k must be at least 1"));
        }
        if self.concurrency == 0 {
            return Err(CliError::config("concurrency must be at least 1"));
        }
        self.compose
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        let manifest = self.manifest_path();
        if std::fs::metadata(&manifest).is_err() {
            return Err(CliError::config(format!(
                "{} is not readable",
                manifest.display()
            )));
        }
        if !(self.request_timeout_secs > 0.0 && self.shutdown_grace_secs >= 0.0) {
            return Err(CliError::config("timeouts must be positive"));
        }
        if self.auth.mode == AuthMode::Bearer
            && self.auth.token.as_deref().is_none_or(str::is_empty)
        {
            return Err(CliError::config(format!(
                "bearer auth needs a token in ${}",
                self.auth.token_env
            )));
        }
        if albumfill_core::pipeline::file_safe(&self.service_run) != self.service_run {
            return Err(CliError::config(format!(
                "service_run {:?} is not a plain name",
                self.service_run
            )));
        }
        self.gateway
            .validate()
            .map_err(|e| CliError::config(e.to_string()))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dataset.join("manifest.json")
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout_secs)
    }

    pub fn shutdown_grace(&self) -> Duration {
        Duration::from_secs_f64(self.shutdown_grace_secs)
    }
}
