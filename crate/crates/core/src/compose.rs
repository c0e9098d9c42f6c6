//! Visible-region extraction and composed query embeddings.

use image::{Rgb, RgbImage};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSource, EmbeddingVector};
use crate::gateway::{Gateway, GatewayError};
use crate::imageio::{self, ImageIoError};
use crate::mask::Mask;

#[derive(Debug, thiserror::Error)]
pub enum ComposeError {
    #[error("mask is {mask_w}x{mask_h}, image is {image_w}x{image_h}")]
    ShapeMismatch {
        mask_w: u32,
        mask_h: u32,
        image_w: u32,
        image_h: u32,
    },
    #[error("composition mode {0} needs reasoning text")]
    MissingReasoning(&'static str),
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
}

/// Zeroes the occluded pixels: `image ⊙ (1 − mask)`.
pub fn visible_region(image: &RgbImage, mask: &Mask) -> Result<RgbImage, ComposeError> {
    if image.dimensions() != mask.dims() {
        return Err(ComposeError::ShapeMismatch {
            mask_w: mask.width(),
            mask_h: mask.height(),
            image_w: image.width(),
            image_h: image.height(),
        });
    }
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(x, y) {
            *px = Rgb([0, 0, 0]);
        }
    }
    Ok(out)
}

/// PNG-in, PNG-out variant of [`visible_region`].
pub fn visible_region_png(image_png: &[u8], mask: &Mask) -> Result<Vec<u8>, ComposeError> {
    let image = imageio::decode_rgb(image_png)?;
    Ok(imageio::encode_rgb_png(&visible_region(&image, mask)?)?)
}

pub const DEFAULT_ALPHA: f64 = 0.5;

/// How the query embedding is formed from the visible image and reasoning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CompositionPolicy {
    /// `normalize(alpha·text + (1 − alpha)·image)`.
    InternalFusion {
        alpha: f64,
    },
    /// Delegate to the configured compose service.
    ExternalCompose,
    /// Visible-image embedding only; reasoning is not requested.
    ImageOnly,
    TextOnly,
}

impl Default for CompositionPolicy {
    fn default() -> Self {
        CompositionPolicy::InternalFusion {
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl CompositionPolicy {
    pub fn mode_name(&self) -> &'static str {
        match self {
            CompositionPolicy::InternalFusion { .. } => "internal_fusion",
            CompositionPolicy::ExternalCompose => "external_compose",
            CompositionPolicy::ImageOnly => "image_only",
            CompositionPolicy::TextOnly => "text_only",
        }
    }

    /// Builds a policy from a mode name and optional alpha; alpha is
    /// accepted only for `internal_fusion`.
    pub fn parse(mode: &str, alpha: Option<f64>) -> Result<Self, String> {
        let policy = match mode {
            "internal_fusion" => CompositionPolicy::InternalFusion {
                alpha: alpha.unwrap_or(DEFAULT_ALPHA),
            },
            "external_compose" => CompositionPolicy::ExternalCompose,
            "image_only" => CompositionPolicy::ImageOnly,
            "text_only" => CompositionPolicy::TextOnly,
            other => return Err(format!("unknown compose mode {other:?}")),
        };
        if alpha.is_some() && !matches!(policy, CompositionPolicy::InternalFusion { .. }) {
            return Err(format!(
                "--alpha only applies to internal_fusion, not {mode}"
            ));
        }
        policy.validate().map_err(|e| e.to_string())?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), ComposeError> {
        match *self {
            CompositionPolicy::InternalFusion { alpha } if !(0.0..=1.0).contains(&alpha) => {
                Err(ComposeError::InvalidAlpha(alpha))
            }
            _ => Ok(()),
        }
    }

    pub fn needs_reasoning(&self) -> bool {
        !matches!(self, CompositionPolicy::ImageOnly)
    }
}

/// Convex combination of two unit vectors, renormalised. `alpha` is the
/// text weight; the endpoints return the inputs unchanged. An exactly
/// cancelling sum falls back to the image vector.
pub fn fuse(
    image: &EmbeddingVector,
    text: &EmbeddingVector,
    alpha: f64,
) -> Result<EmbeddingVector, ComposeError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ComposeError::InvalidAlpha(alpha));
    }
    if alpha == 0.0 {
        return Ok(image.clone().with_source(EmbeddingSource::Composed));
    }
    if alpha == 1.0 {
        return Ok(text.clone().with_source(EmbeddingSource::Composed));
    }
    let mixed: Vec<f64> = image
        .values()
        .iter()
        .zip(text.values())
        .map(|(&v, &t)| alpha * f64::from(t) + (1.0 - alpha) * f64::from(v))
        .collect();
    match EmbeddingVector::normalized_f64(&mixed, EmbeddingSource::Composed) {
        Ok(q) => Ok(q),
        Err(_) => {
            warn!("image and text embeddings cancel at alpha {alpha}; using the image embedding");
            Ok(image.clone().with_source(EmbeddingSource::Composed))
        }
    }
}

/// Composed query embedding for a visible image and its reasoning text.
pub async fn compose(
    visible_png: &[u8],
    reasoning: Option<&str>,
    policy: CompositionPolicy,
    gateway: &Gateway,
) -> Result<EmbeddingVector, ComposeError> {
    policy.validate()?;
    let reasoning = reasoning.filter(|r| !r.trim().is_empty());
    let missing = || ComposeError::MissingReasoning(policy.mode_name());
    let q = match policy {
        CompositionPolicy::ImageOnly => gateway.embed_image(visible_png).await?,
        CompositionPolicy::TextOnly => gateway.embed_text(reasoning.ok_or_else(missing)?).await?,
        CompositionPolicy::ExternalCompose => {
            gateway
                .compose(visible_png, reasoning.ok_or_else(missing)?)
                .await?
        }
        CompositionPolicy::InternalFusion { alpha } => {
            let text = reasoning.ok_or_else(missing)?;
            let (v, t) =
                tokio::try_join!(gateway.embed_image(visible_png), gateway.embed_text(text))?;
            return fuse(&v, &t, alpha);
        }
    };
    Ok(q.with_source(EmbeddingSource::Composed))
}
