//! Client layer over the external neural services.
//!
//! A [`ModelBackend`] is pure transport: HTTP ([`http::HttpBackend`]) or the
//! deterministic [`mock::MockWorld`]. [`Gateway`] wraps a backend with the
//! call policy every caller relies on: per-kind timeouts, bounded retries
//! with seeded exponential backoff, bounded concurrency, output
//! normalisation and shape checks, and a call log.

pub mod clock;
pub mod config;
pub mod http;
pub mod mock;
pub mod wire;

use std::collections::HashMap;
use std::fmt;
use std::future::Future;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use crate::embedding::{EmbeddingSource, EmbeddingVector};
use crate::imageio;
use crate::mask::Mask;
use crate::seed::rng_from;

use self::clock::{Clock, MockClock, SystemClock};
use self::config::{ConfigError, GatewayConfig};

/// Default reasoning instruction sent with the visible image.
pub const DEFAULT_INSTRUCTION: &str =
    "Describe what likely exists in the masked region based on the visible context.";

const MAX_BACKOFF: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Reasoning,
    EmbedImage,
    EmbedText,
    Compose,
    Complete,
    Perceptual,
    Judge,
}

impl ProviderKind {
    pub const ALL: [ProviderKind; 7] = [
        ProviderKind::Reasoning,
        ProviderKind::EmbedImage,
        ProviderKind::EmbedText,
        ProviderKind::Compose,
        ProviderKind::Complete,
        ProviderKind::Perceptual,
        ProviderKind::Judge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::Reasoning => "reasoning",
            ProviderKind::EmbedImage => "embed_image",
            ProviderKind::EmbedText => "embed_text",
            ProviderKind::Compose => "compose",
            ProviderKind::Complete => "complete",
            ProviderKind::Perceptual => "perceptual",
            ProviderKind::Judge => "judge",
        }
    }

    pub fn env_key(self) -> String {
        self.as_str().to_ascii_uppercase()
    }
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProviderKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown provider kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerceptualMetric {
    Lpips,
    Dreamsim,
}

impl PerceptualMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            PerceptualMetric::Lpips => "lpips",
            PerceptualMetric::Dreamsim => "dreamsim",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum EmbedPayload<'a> {
    Image(&'a [u8]),
    Text(&'a str),
}

/// Transport-level failure reported by a backend.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider timed out")]
    Timeout,
    #[error("provider rejected request: {0}")]
    Rejected(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("no provider configured")]
    NotConfigured,
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Unavailable(_) | ProviderError::Timeout)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("{kind} timed out after {attempts} attempt(s)")]
    Timeout { kind: ProviderKind, attempts: u32 },
    #[error("{kind} unavailable after {attempts} attempt(s): {message}")]
    Unavailable {
        kind: ProviderKind,
        attempts: u32,
        message: String,
    },
    #[error("{kind} returned an empty response")]
    EmptyResponse { kind: ProviderKind },
    #[error("provider returned dimension {got}, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("provider returned a {}x{} image, expected {}x{}", got.0, got.1, expected.0, expected.1)]
    ShapeMismatch {
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error("{kind} rejected the request: {message}")]
    Rejected { kind: ProviderKind, message: String },
    #[error("{kind} returned a malformed response: {message}")]
    Malformed { kind: ProviderKind, message: String },
    #[error("no {0} provider configured")]
    NotConfigured(ProviderKind),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl GatewayError {
    /// Short machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Timeout { .. } => "timeout",
            GatewayError::Unavailable { .. } => "unavailable",
            GatewayError::EmptyResponse { .. } => "empty_response",
            GatewayError::DimMismatch { .. } => "dim_mismatch",
            GatewayError::ShapeMismatch { .. } => "shape_mismatch",
            GatewayError::Rejected { .. } => "rejected",
            GatewayError::Malformed { .. } => "malformed",
            GatewayError::NotConfigured(_) => "not_configured",
            GatewayError::InvalidInput(_) => "invalid_input",
        }
    }
}

#[async_trait]
pub trait ModelBackend: Send + Sync {
    fn supports(&self, kind: ProviderKind) -> bool;
    fn model_id(&self, kind: ProviderKind) -> Option<String>;

    async fn reason(
        &self,
        image_png: &[u8],
        mask_png: &[u8],
        instruction: &str,
    ) -> Result<String, ProviderError>;
    async fn embed(
        &self,
        payload: EmbedPayload<'_>,
        encoder: Option<&str>,
    ) -> Result<Vec<f32>, ProviderError>;
    async fn compose(&self, visible_png: &[u8], text: &str) -> Result<Vec<f32>, ProviderError>;
    async fn complete(
        &self,
        masked_png: &[u8],
        mask_png: &[u8],
        reference_png: &[u8],
    ) -> Result<Vec<u8>, ProviderError>;
    async fn perceptual(
        &self,
        a_png: &[u8],
        b_png: &[u8],
        metric: PerceptualMetric,
    ) -> Result<f64, ProviderError>;
    async fn judge(&self, image_png: &[u8], prompt: &str) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CallPolicy {
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_concurrency: usize,
}

impl Default for CallPolicy {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            max_retries: 2,
            max_concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub kind: ProviderKind,
    /// Hex digest of the request payload.
    pub input_digest: String,
    pub attempts: u32,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

fn digest_parts(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..16])
}

pub struct Gateway {
    backend: Arc<dyn ModelBackend>,
    dim: usize,
    policies: HashMap<ProviderKind, CallPolicy>,
    limits: HashMap<ProviderKind, Arc<Semaphore>>,
    clock: Arc<dyn Clock>,
    backoff_base: Duration,
    log: Mutex<Vec<CallRecord>>,
}

impl Gateway {
    /// Gateway with default policies for every kind.
    pub fn new(backend: Arc<dyn ModelBackend>, dim: usize) -> Self {
        let mut g = Self {
            backend,
            dim,
            policies: HashMap::new(),
            limits: HashMap::new(),
            clock: Arc::new(SystemClock::new()),
            backoff_base: Duration::from_millis(250),
            log: Mutex::new(Vec::new()),
        };
        for kind in ProviderKind::ALL {
            g.set_policy(kind, CallPolicy::default());
        }
        g
    }

    /// Builds a gateway from config: the mock world when `config.mock` is
    /// set, HTTP otherwise.
    pub fn from_config(config: &GatewayConfig, dim: usize) -> Result<Self, ConfigError> {
        config.validate()?;
        let backend: Arc<dyn ModelBackend> = match &config.mock {
            Some(settings) => Arc::new(match &settings.world {
                Some(path) => mock::MockWorld::load(path, dim).map_err(|e| ConfigError::Read {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?,
                None => mock::MockWorld::new(settings.seed, dim),
            }),
            None => Arc::new(http::HttpBackend::new(config.endpoints.clone())),
        };
        let mut g = Self::new(backend, dim).with_backoff(config.backoff());
        if config.mock.is_some() {
            g = g.with_clock(Arc::new(MockClock::new()));
        }
        for e in &config.endpoints {
            g.set_policy(e.kind, e.policy());
        }
        Ok(g)
    }

    pub fn with_policy(mut self, kind: ProviderKind, policy: CallPolicy) -> Self {
        self.set_policy(kind, policy);
        self
    }

    pub fn with_policy_all(mut self, policy: CallPolicy) -> Self {
        for kind in ProviderKind::ALL {
            self.set_policy(kind, policy);
        }
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn set_policy(&mut self, kind: ProviderKind, policy: CallPolicy) {
        self.limits.insert(
            kind,
            Arc::new(Semaphore::new(policy.max_concurrency.max(1))),
        );
        self.policies.insert(kind, policy);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn supports(&self, kind: ProviderKind) -> bool {
        self.backend.supports(kind)
    }

    pub fn model_id(&self, kind: ProviderKind) -> Option<String> {
        self.backend.model_id(kind)
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self, kind: ProviderKind) -> usize {
        self.log
            .lock()
            .unwrap()
            .iter()
            .filter(|c| c.kind == kind)
            .count()
    }

    /// Delay before retry number `attempt` (1-based): exponential in the
    /// attempt, with jitter in [0.5, 1.5) seeded by the request digest.
    pub fn backoff_delay(&self, digest: &str, attempt: u32) -> Duration {
        let jitter: f64 = rng_from(&[b"backoff", digest.as_bytes(), &attempt.to_le_bytes()])
            .random_range(0.5..1.5);
        let exp = 2f64.powi(attempt.saturating_sub(1).min(20) as i32);
        self.backoff_base.mul_f64(exp * jitter).min(MAX_BACKOFF)
    }

    async fn call<T, F, Fut>(
        &self,
        kind: ProviderKind,
        digest: String,
        instruction: Option<&str>,
        op: F,
    ) -> Result<T, GatewayError>
    where
        F: Fn() -> Fut,
        Fut: Future<Output = Result<T, ProviderError>>,
    {
        if !self.backend.supports(kind) {
            return Err(GatewayError::NotConfigured(kind));
        }
        let policy = self.policies[&kind];
        let limit = self.limits[&kind].clone();
        let mut attempts = 0u32;
        let outcome = loop {
            attempts += 1;
            let result = {
                let _permit = limit.acquire().await.expect("gateway semaphore closed");
                tokio::time::timeout(policy.timeout, op()).await
            };
            let err = match result {
                Ok(Ok(v)) => break Ok(v),
                Ok(Err(e)) => e,
                Err(_) => ProviderError::Timeout,
            };
            if !err.is_retryable() || attempts > policy.max_retries {
                break Err(err);
            }
            self.clock
                .sleep(self.backoff_delay(&digest, attempts))
                .await;
        };
        self.log.lock().unwrap().push(CallRecord {
            kind,
            input_digest: digest,
            attempts,
            ok: outcome.is_ok(),
            instruction: instruction.map(str::to_string),
        });
        outcome.map_err(|e| match e {
            ProviderError::Timeout => GatewayError::Timeout { kind, attempts },
            ProviderError::Unavailable(message) => GatewayError::Unavailable {
                kind,
                attempts,
                message,
            },
            ProviderError::Rejected(message) => GatewayError::Rejected { kind, message },
            ProviderError::Malformed(message) => GatewayError::Malformed { kind, message },
            ProviderError::NotConfigured => GatewayError::NotConfigured(kind),
        })
    }

    /// Masked-region hypothesis for the visible image.
    pub async fn reason(
        &self,
        visible_png: &[u8],
        mask: &Mask,
        instruction: &str,
    ) -> Result<String, GatewayError> {
        let image =
            imageio::decode(visible_png).map_err(|e| GatewayError::InvalidInput(e.to_string()))?;
        if (image.width(), image.height()) != mask.dims() {
            return Err(GatewayError::InvalidInput(format!(
                "mask is {}x{}, image is {}x{}",
                mask.width(),
                mask.height(),
                image.width(),
                image.height()
            )));
        }
        let mask_png = mask
            .to_png()
            .map_err(|e| GatewayError::InvalidInput(e.to_string()))?;
        let digest = digest_parts(&[b"reason", visible_png, &mask_png, instruction.as_bytes()]);
        let text = self
            .call(ProviderKind::Reasoning, digest, Some(instruction), || {
                self.backend.reason(visible_png, &mask_png, instruction)
            })
            .await?;
        let text = text.trim();
        if text.is_empty() {
            return Err(GatewayError::EmptyResponse {
                kind: ProviderKind::Reasoning,
            });
        }
        Ok(text.to_string())
    }

    async fn embed(
        &self,
        payload: EmbedPayload<'_>,
        encoder: Option<&str>,
    ) -> Result<EmbeddingVector, GatewayError> {
        let (kind, source, digest) = match payload {
            EmbedPayload::Image(bytes) => {
                if bytes.is_empty() {
                    return Err(GatewayError::InvalidInput("empty image payload".into()));
                }
                let tag = encoder.unwrap_or("").as_bytes();
                (
                    ProviderKind::EmbedImage,
                    EmbeddingSource::Image,
                    digest_parts(&[b"embed-image", tag, bytes]),
                )
            }
            EmbedPayload::Text(text) => {
                if text.is_empty() {
                    return Err(GatewayError::InvalidInput("empty text payload".into()));
                }
                (
                    ProviderKind::EmbedText,
                    EmbeddingSource::Text,
                    digest_parts(&[b"embed-text", text.as_bytes()]),
                )
            }
        };
        let values = self
            .call(kind, digest, None, || self.backend.embed(payload, encoder))
            .await?;
        self.to_unit(kind, &values, source)
    }

    fn to_unit(
        &self,
        kind: ProviderKind,
        values: &[f32],
        source: EmbeddingSource,
    ) -> Result<EmbeddingVector, GatewayError> {
        if values.len() != self.dim {
            return Err(GatewayError::DimMismatch {
                expected: self.dim,
                got: values.len(),
            });
        }
        EmbeddingVector::normalized(values, source).map_err(|e| GatewayError::Malformed {
            kind,
            message: e.to_string(),
        })
    }

    pub async fn embed_image(&self, png: &[u8]) -> Result<EmbeddingVector, GatewayError> {
        self.embed(EmbedPayload::Image(png), None).await
    }

    /// Image embedding from a named encoder (e.g. `dino`).
    pub async fn embed_image_with(
        &self,
        png: &[u8],
        encoder: &str,
    ) -> Result<EmbeddingVector, GatewayError> {
        self.embed(EmbedPayload::Image(png), Some(encoder)).await
    }

    pub async fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        self.embed(EmbedPayload::Text(text), None).await
    }

    /// Composed embedding from an external composition service.
    pub async fn compose(
        &self,
        visible_png: &[u8],
        text: &str,
    ) -> Result<EmbeddingVector, GatewayError> {
        let digest = digest_parts(&[b"compose", visible_png, text.as_bytes()]);
        let values = self
            .call(ProviderKind::Compose, digest, None, || {
                self.backend.compose(visible_png, text)
            })
            .await?;
        self.to_unit(ProviderKind::Compose, &values, EmbeddingSource::Composed)
    }

    /// Reference-based completion. The visible region of `masked_png` is
    /// always composited back over the provider output.
    pub async fn complete(
        &self,
        masked_png: &[u8],
        mask: &Mask,
        reference_png: &[u8],
    ) -> Result<RgbImage, GatewayError> {
        let masked = imageio::decode_rgb(masked_png)
            .map_err(|e| GatewayError::InvalidInput(e.to_string()))?;
        if masked.dimensions() != mask.dims() {
            return Err(GatewayError::InvalidInput(format!(
                "mask is {}x{}, masked image is {}x{}",
                mask.width(),
                mask.height(),
                masked.width(),
                masked.height()
            )));
        }
        let mask_png = mask
            .to_png()
            .map_err(|e| GatewayError::InvalidInput(e.to_string()))?;
        let digest = digest_parts(&[b"complete", masked_png, &mask_png, reference_png]);
        let out = self
            .call(ProviderKind::Complete, digest, None, || {
                self.backend.complete(masked_png, &mask_png, reference_png)
            })
            .await?;
        let mut out = imageio::decode_rgb(&out).map_err(|e| GatewayError::Malformed {
            kind: ProviderKind::Complete,
            message: e.to_string(),
        })?;
        if out.dimensions() != masked.dimensions() {
            return Err(GatewayError::ShapeMismatch {
                expected: masked.dimensions(),
                got: out.dimensions(),
            });
        }
        for (x, y, px) in out.enumerate_pixels_mut() {
            if !mask.get(x, y) {
                *px = *masked.get_pixel(x, y);
            }
        }
        Ok(out)
    }

    pub async fn perceptual(
        &self,
        a_png: &[u8],
        b_png: &[u8],
        metric: PerceptualMetric,
    ) -> Result<f64, GatewayError> {
        let digest = digest_parts(&[b"perceptual", metric.as_str().as_bytes(), a_png, b_png]);
        let score = self
            .call(ProviderKind::Perceptual, digest, None, || {
                self.backend.perceptual(a_png, b_png, metric)
            })
            .await?;
        if !score.is_finite() {
            return Err(GatewayError::Malformed {
                kind: ProviderKind::Perceptual,
                message: format!("non-finite score {score}"),
            });
        }
        Ok(score)
    }

    /// Raw judge response text for `prompt` about `image_png`.
    pub async fn judge(&self, image_png: &[u8], prompt: &str) -> Result<String, GatewayError> {
        let digest = digest_parts(&[b"judge", image_png, prompt.as_bytes()]);
        let text = self
            .call(ProviderKind::Judge, digest, None, || {
                self.backend.judge(image_png, prompt)
            })
            .await?;
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyResponse {
                kind: ProviderKind::Judge,
            });
        }
        Ok(text)
    }
}
