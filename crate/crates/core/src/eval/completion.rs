use std::collections::BTreeMap;
use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::image_metrics::{psnr, psnr_masked, ssim, ssim_masked};
use super::EvalError;
use crate::gateway::{Gateway, PerceptualMetric, ProviderKind};
use crate::imageio;
use crate::index::cosine;
use crate::mask::{Bucket, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Clip,
    Dino,
    Lpips,
    Dreamsim,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 4] = [
        EncoderKind::Clip,
        EncoderKind::Dino,
        EncoderKind::Dreamsim,
        EncoderKind::Lpips,
    ];

    /// Report column label.
    pub fn label(self) -> &'static str {
        match self {
            EncoderKind::Clip => "CLIP",
            EncoderKind::Dino => "DINO",
            EncoderKind::Lpips => "LPIPS",
            EncoderKind::Dreamsim => "DreamSim",
        }
    }

    fn provider(self) -> ProviderKind {
        match self {
            EncoderKind::Clip | EncoderKind::Dino => ProviderKind::EmbedImage,
            EncoderKind::Lpips | EncoderKind::Dreamsim => ProviderKind::Perceptual,
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// `100·cos` between embeddings for CLIP and DINO; the perceptual
/// endpoint's raw distance for LPIPS and DreamSim.
pub async fn embedding_similarity(
    out_png: &[u8],
    gt_png: &[u8],
    kind: EncoderKind,
    gateway: &Gateway,
) -> Result<f64, EvalError> {
    match kind {
        EncoderKind::Clip | EncoderKind::Dino => {
            let (a, b) = if kind == EncoderKind::Clip {
                tokio::try_join!(gateway.embed_image(out_png), gateway.embed_image(gt_png))?
            } else {
                tokio::try_join!(
                    gateway.embed_image_with(out_png, "dino"),
                    gateway.embed_image_with(gt_png, "dino")
                )?
            };
            Ok(100.0 * cosine(&a, &b).expect("gateway checks dimensions"))
        }
        EncoderKind::Lpips => Ok(gateway
            .perceptual(out_png, gt_png, PerceptualMetric::Lpips)
            .await?),
        EncoderKind::Dreamsim => Ok(gateway
            .perceptual(out_png, gt_png, PerceptualMetric::Dreamsim)
            .await?),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionOptions {
    pub encoders: Vec<EncoderKind>,
    /// PSNR and SSIM over the occluded region only.
    pub masked_only: bool,
}

impl Default for CompletionOptions {
    fn default() -> Self {
        Self {
            encoders: EncoderKind::ALL.to_vec(),
            masked_only: false,
        }
    }
}

/// Completion metrics of one query, keyed by report column label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionSample {
    pub query_id: String,
    pub bucket: Option<Bucket>,
    pub values: BTreeMap<String, f64>,
}

/// Scores `output` against the ground-truth `original`. Encoders whose
/// provider is not configured are left out.
pub async fn evaluate_completion(
    query_id: &str,
    bucket: Option<Bucket>,
    output: &RgbImage,
    original: &RgbImage,
    mask: &Mask,
    gateway: &Gateway,
    options: &CompletionOptions,
) -> Result<CompletionSample, EvalError> {
    let mut values = BTreeMap::new();
    let (p, s) = if options.masked_only {
        (
            psnr_masked(output, original, mask, 255.0)?,
            ssim_masked(output, original, mask)?,
        )
    } else {
        (psnr(output, original, 255.0)?, ssim(output, original)?)
    };
    values.insert("PSNR".to_string(), p);
    values.insert("SSIM".to_string(), s);
    let out_png = imageio::encode_rgb_png(output)?;
    let gt_png = imageio::encode_rgb_png(original)?;
    for &kind in &options.encoders {
        if !gateway.supports(kind.provider()) {
            continue;
        }
        let v = embedding_similarity(&out_png, &gt_png, kind, gateway).await?;
        values.insert(kind.label().to_string(), v);
    }
    Ok(CompletionSample {
        query_id: query_id.to_string(),
        bucket,
        values,
    })
}
