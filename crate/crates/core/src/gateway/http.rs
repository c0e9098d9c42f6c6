//! HTTP transport for the native provider contract.

use std::collections::HashMap;

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::config::{ProviderEndpoint, WireProtocol};
use super::wire::{self, b64};
use super::{EmbedPayload, ModelBackend, PerceptualMetric, ProviderError, ProviderKind};

pub struct HttpBackend {
    client: reqwest::Client,
    endpoints: HashMap<ProviderKind, ProviderEndpoint>,
}

impl HttpBackend {
    pub fn new(endpoints: Vec<ProviderEndpoint>) -> Self {
        Self {
            client: reqwest::Client::new(),
            endpoints: endpoints.into_iter().map(|e| (e.kind, e)).collect(),
        }
    }

    fn endpoint(&self, kind: ProviderKind) -> Result<&ProviderEndpoint, ProviderError> {
        self.endpoints
            .get(&kind)
            .ok_or(ProviderError::NotConfigured)
    }

    async fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        endpoint: &ProviderEndpoint,
        path: &str,
        body: &B,
    ) -> Result<R, ProviderError> {
        let url = format!("{}{}", endpoint.base_url.trim_end_matches('/'), path);
        let mut req = self.client.post(&url).json(body);
        if let Some(token) = &endpoint.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().await.map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::Unavailable(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(ProviderError::Unavailable(format!("{url}: HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            return Err(ProviderError::Rejected(format!(
                "{url}: HTTP {status}: {text}"
            )));
        }
        resp.json::<R>()
            .await
            .map_err(|e| ProviderError::Malformed(format!("{url}: {e}")))
    }

    async fn chat(
        &self,
        endpoint: &ProviderEndpoint,
        text: &str,
        images: &[&[u8]],
    ) -> Result<String, ProviderError> {
        let body = wire::chat_request(endpoint.model.as_deref(), text, images);
        let resp: serde_json::Value = self.post(endpoint, "/v1/chat/completions", &body).await?;
        wire::chat_content(&resp)
            .ok_or_else(|| ProviderError::Malformed("no choices[0].message.content".into()))
    }
}

#[async_trait]
impl ModelBackend for HttpBackend {
    fn supports(&self, kind: ProviderKind) -> bool {
        self.endpoints.contains_key(&kind)
    }

    fn model_id(&self, kind: ProviderKind) -> Option<String> {
        self.endpoints
            .get(&kind)
            .map(|e| e.model.clone().unwrap_or_else(|| e.base_url.clone()))
    }

    async fn reason(
        &self,
        image_png: &[u8],
        mask_png: &[u8],
        instruction: &str,
    ) -> Result<String, ProviderError> {
        let ep = self.endpoint(ProviderKind::Reasoning)?;
        match ep.protocol {
            WireProtocol::OpenaiChat => self.chat(ep, instruction, &[image_png, mask_png]).await,
            WireProtocol::Native => {
                let body = wire::ReasonRequest {
                    image_b64: b64(image_png),
                    mask_b64: b64(mask_png),
                    instruction: instruction.to_string(),
                };
                let r: wire::TextResponse = self.post(ep, "/v1/reason", &body).await?;
                Ok(r.text)
            }
        }
    }

    async fn embed(
        &self,
        payload: EmbedPayload<'_>,
        encoder: Option<&str>,
    ) -> Result<Vec<f32>, ProviderError> {
        let (ep, body) = match payload {
            EmbedPayload::Image(bytes) => (
                self.endpoint(ProviderKind::EmbedImage)?,
                wire::EmbedRequest {
                    kind: wire::EmbedKind::Image,
                    payload_b64: Some(b64(bytes)),
                    text: None,
                    encoder: encoder.map(str::to_string),
                },
            ),
            EmbedPayload::Text(text) => (
                self.endpoint(ProviderKind::EmbedText)?,
                wire::EmbedRequest {
                    kind: wire::EmbedKind::Text,
                    payload_b64: None,
                    text: Some(text.to_string()),
                    encoder: None,
                },
            ),
        };
        let r: wire::VectorResponse = self.post(ep, "/v1/embed", &body).await?;
        Ok(r.values)
    }

    async fn compose(&self, visible_png: &[u8], text: &str) -> Result<Vec<f32>, ProviderError> {
        let ep = self.endpoint(ProviderKind::Compose)?;
        let body = wire::ComposeRequest {
            visible_b64: b64(visible_png),
            text: text.to_string(),
        };
        let r: wire::VectorResponse = self.post(ep, "/v1/compose", &body).await?;
        Ok(r.values)
    }

    async fn complete(
        &self,
        masked_png: &[u8],
        mask_png: &[u8],
        reference_png: &[u8],
    ) -> Result<Vec<u8>, ProviderError> {
        let ep = self.endpoint(ProviderKind::Complete)?;
        let body = wire::CompleteRequest {
            masked_b64: b64(masked_png),
            mask_b64: b64(mask_png),
            reference_b64: b64(reference_png),
        };
        let r: wire::ImageResponse = self.post(ep, "/v1/complete", &body).await?;
        wire::unb64(&r.image_b64).map_err(|e| ProviderError::Malformed(e.to_string()))
    }

    async fn perceptual(
        &self,
        a_png: &[u8],
        b_png: &[u8],
        metric: PerceptualMetric,
    ) -> Result<f64, ProviderError> {
        let ep = self.endpoint(ProviderKind::Perceptual)?;
        let body = wire::PerceptualRequest {
            a_b64: b64(a_png),
            b_b64: b64(b_png),
            metric: metric.as_str().to_string(),
        };
        let r: wire::ScoreResponse = self.post(ep, "/v1/perceptual", &body).await?;
        Ok(r.score)
    }

    async fn judge(&self, image_png: &[u8], prompt: &str) -> Result<String, ProviderError> {
        let ep = self.endpoint(ProviderKind::Judge)?;
        match ep.protocol {
            WireProtocol::OpenaiChat => self.chat(ep, prompt, &[image_png]).await,
            WireProtocol::Native => {
                let body = wire::JudgeRequest {
                    image_b64: b64(image_png),
                    prompt: prompt.to_string(),
                };
                let r: wire::TextResponse = self.post(ep, "/v1/judge", &body).await?;
                Ok(r.text)
            }
        }
    }
}
