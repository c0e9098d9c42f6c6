//! Deterministic stand-in for every external service.
//!
//! Outputs are pure functions of `(seed, content digest of the inputs)`, so
//! a full pipeline run under the mock is bit-reproducible across processes.
//! Image digests are taken over decoded pixels, not encoded bytes, so they
//! do not depend on the PNG encoder. Tests and fixtures can plant vectors
//! and reasoning strings, poison inputs, and switch individual services
//! into misbehaving modes.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbedPayload, ModelBackend, PerceptualMetric, ProviderError, ProviderKind};
use crate::compose::visible_region;
use crate::imageio;
use crate::mask::Mask;
use crate::seed::rng_from;

/// Digest of an image's decoded RGB pixels, or of the raw bytes when they
/// do not decode as an image.
pub fn content_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    match imageio::decode_rgb(bytes) {
        Ok(img) => {
            h.update(b"img");
            h.update(img.width().to_le_bytes());
            h.update(img.height().to_le_bytes());
            h.update(img.as_raw());
        }
        Err(_) => {
            h.update(b"raw");
            h.update(bytes);
        }
    }
    hex::encode(h.finalize())
}

pub fn image_digest(img: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(b"img");
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    hex::encode(h.finalize())
}

pub fn text_digest(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"txt");
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

pub fn mask_digest(mask: &Mask) -> String {
    content_digest(&mask.to_png().expect("mask encodes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MockEncoder {
    /// Pseudo-random unit vector per distinct input.
    #[default]
    Hash,
    /// Mean colour over a `grid × grid` tiling, centred and folded into the
    /// embedding dimension. Similar-looking images get similar vectors.
    PixelGrid { grid: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionBehavior {
    /// Masked pixels are copied from the (resized) reference.
    #[default]
    Paste,
    /// Returns an image one pixel wider than the input.
    WrongSize,
    /// Returns the reference unchanged.
    ReturnReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeBehavior {
    /// JSON with scores derived from the request digest.
    #[default]
    HashScores,
    /// Prose only, never parseable.
    Prose,
    /// Prose on the first request for each input, JSON afterwards.
    ProseOnce,
}

const SUBJECTS: [&str; 6] = [
    "the person's face turned slightly toward the camera",
    "the upper body of the same person in a casual jacket",
    "a raised arm holding a drink",
    "the person's shoulder and dark hair",
    "a smiling face with glasses",
    "the lower body in jeans, standing",
];
const SCENES: [&str; 4] = [
    "an indoor party with warm lighting",
    "an outdoor park on a sunny day",
    "a restaurant table",
    "a beach at dusk",
];

#[derive(Default)]
struct Stats {
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    calls: Mutex<HashMap<ProviderKind, usize>>,
}

pub struct MockWorld {
    seed: u64,
    dim: usize,
    encoder: MockEncoder,
    planted_vectors: HashMap<String, Vec<f32>>,
    planted_reasoning: HashMap<String, String>,
    poisoned: HashSet<String>,
    disabled: HashSet<ProviderKind>,
    model_ids: HashMap<ProviderKind, String>,
    reasoning_override: Option<String>,
    output_dim: Option<usize>,
    completion: CompletionBehavior,
    judge: JudgeBehavior,
    latency: Duration,
    unavailable_first: usize,
    failures_left: AtomicUsize,
    prose_seen: Mutex<HashSet<String>>,
    stats: Stats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedImage {
    pub file: String,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedText {
    pub text: String,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedReasoning {
    /// Unmasked image file.
    pub image: String,
    /// Mask file; the reasoning is keyed by the resulting visible region.
    pub mask: String,
    pub text: String,
}

/// On-disk description of a mock world; paths are relative to the file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockWorldFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub encoder: MockEncoder,
    #[serde(default)]
    pub planted_images: Vec<PlantedImage>,
    #[serde(default)]
    pub planted_texts: Vec<PlantedText>,
    #[serde(default)]
    pub planted_reasoning: Vec<PlantedReasoning>,
    #[serde(default)]
    pub model_ids: HashMap<ProviderKind, String>,
}

#[derive(Debug, thiserror::Error)]
pub enum MockWorldError {
    #[error("{0}")]
    Read(String),
    #[error("planted input {0}: {1}")]
    Planted(String, String),
}

impl MockWorld {
    pub fn new(seed: u64, dim: usize) -> Self {
        let model_ids = ProviderKind::ALL
            .into_iter()
            .map(|k| (k, format!("mock-{k}")))
            .collect();
        Self {
            seed,
            dim,
            encoder: MockEncoder::Hash,
            planted_vectors: HashMap::new(),
            planted_reasoning: HashMap::new(),
            poisoned: HashSet::new(),
            disabled: HashSet::new(),
            model_ids,
            reasoning_override: None,
            output_dim: None,
            completion: CompletionBehavior::Paste,
            judge: JudgeBehavior::HashScores,
            latency: Duration::ZERO,
            unavailable_first: 0,
            failures_left: AtomicUsize::new(0),
            prose_seen: Mutex::new(HashSet::new()),
            stats: Stats::default(),
        }
    }

    pub fn load(path: &Path, dim: usize) -> Result<Self, MockWorldError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MockWorldError::Read(format!("{}: {e}", path.display())))?;
        let file: MockWorldFile = serde_json::from_str(&text)
            .map_err(|e| MockWorldError::Read(format!("{}: {e}", path.display())))?;
        Self::from_file(&file, crate::model::manifest_root(path).as_path(), dim)
    }

    pub fn from_file(
        file: &MockWorldFile,
        root: &Path,
        dim: usize,
    ) -> Result<Self, MockWorldError> {
        let mut world = Self::new(file.seed, dim).with_encoder(file.encoder);
        for (k, id) in &file.model_ids {
            world.model_ids.insert(*k, id.clone());
        }
        let read = |rel: &str| {
            std::fs::read(root.join(rel))
                .map_err(|e| MockWorldError::Planted(rel.to_string(), e.to_string()))
        };
        for p in &file.planted_images {
            world.plant_image(&read(&p.file)?, p.values.clone());
        }
        for p in &file.planted_texts {
            world.plant_text(&p.text, p.values.clone());
        }
        for p in &file.planted_reasoning {
            let image = imageio::decode_rgb(&read(&p.image)?)
                .map_err(|e| MockWorldError::Planted(p.image.clone(), e.to_string()))?;
            let mask = Mask::from_png(&read(&p.mask)?)
                .map_err(|e| MockWorldError::Planted(p.mask.clone(), e.to_string()))?;
            let visible = visible_region(&image, &mask)
                .map_err(|e| MockWorldError::Planted(p.mask.clone(), e.to_string()))?;
            world
                .planted_reasoning
                .insert(image_digest(&visible), p.text.clone());
        }
        Ok(world)
    }

    pub fn with_encoder(mut self, encoder: MockEncoder) -> Self {
        self.encoder = encoder;
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn with_completion(mut self, behavior: CompletionBehavior) -> Self {
        self.completion = behavior;
        self
    }

    pub fn with_judge(mut self, behavior: JudgeBehavior) -> Self {
        self.judge = behavior;
        self
    }

    /// Every reasoning call returns `text` verbatim.
    pub fn with_reasoning_override(mut self, text: impl Into<String>) -> Self {
        self.reasoning_override = Some(text.into());
        self
    }

    /// Embedding outputs of this length instead of the world dimension.
    pub fn with_output_dim(mut self, dim: usize) -> Self {
        self.output_dim = Some(dim);
        self
    }

    pub fn with_model_id(mut self, kind: ProviderKind, id: impl Into<String>) -> Self {
        self.model_ids.insert(kind, id.into());
        self
    }

    pub fn without(mut self, kind: ProviderKind) -> Self {
        self.disabled.insert(kind);
        self
    }

    /// The first `n` calls of any kind fail as unavailable.
    pub fn with_transient_failures(mut self, n: usize) -> Self {
        self.unavailable_first = n;
        self.failures_left = AtomicUsize::new(n);
        self
    }

    pub fn plant_image(&mut self, png: &[u8], values: Vec<f32>) {
        self.planted_vectors.insert(content_digest(png), values);
    }

    pub fn plant_text(&mut self, text: &str, values: Vec<f32>) {
        self.planted_vectors.insert(text_digest(text), values);
    }

    /// Reasoning returned for this exact visible image.
    pub fn plant_reasoning(&mut self, visible: &RgbImage, text: impl Into<String>) {
        self.planted_reasoning
            .insert(image_digest(visible), text.into());
    }

    /// Any call whose input has this content digest fails as unavailable.
    pub fn poison(&mut self, digest: impl Into<String>) {
        self.poisoned.insert(digest.into());
    }

    pub fn max_in_flight(&self) -> usize {
        self.stats.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self, kind: ProviderKind) -> usize {
        self.stats
            .calls
            .lock()
            .unwrap()
            .get(&kind)
            .copied()
            .unwrap_or(0)
    }

    /// Deterministic pseudo-random vector (not unit-norm; the gateway
    /// normalises).
    pub fn hash_vector(&self, tag: &str, digest: &str) -> Vec<f32> {
        let mut rng = rng_from(&[
            b"mock-vector",
            &self.seed.to_le_bytes(),
            tag.as_bytes(),
            digest.as_bytes(),
        ]);
        let dim = self.output_dim.unwrap_or(self.dim);
        (0..dim)
            .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal) as f32)
            .collect()
    }

    pub fn pixel_grid_vector(&self, img: &RgbImage, grid: u32) -> Vec<f32> {
        let dim = self.output_dim.unwrap_or(self.dim);
        let mut out = vec![0f64; dim];
        let (w, h) = img.dimensions();
        let grid = grid.max(1);
        let mut k = 0usize;
        for gy in 0..grid {
            for gx in 0..grid {
                let (x0, x1) = (
                    gx * w / grid,
                    ((gx + 1) * w / grid).max(gx * w / grid + 1).min(w),
                );
                let (y0, y1) = (
                    gy * h / grid,
                    ((gy + 1) * h / grid).max(gy * h / grid + 1).min(h),
                );
                let mut sum = [0f64; 3];
                let mut n = 0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = img.get_pixel(x, y).0;
                        for c in 0..3 {
                            sum[c] += f64::from(p[c]);
                        }
                        n += 1.0;
                    }
                }
                for s in sum {
                    let centred = if n > 0.0 { s / n / 255.0 - 0.5 } else { 0.0 };
                    out[k % dim] += centred;
                    k += 1;
                }
            }
        }
        out[0] += 1e-3;
        out.into_iter().map(|v| v as f32).collect()
    }

    fn image_vector(&self, png: &[u8], encoder: Option<&str>) -> Vec<f32> {
        let digest = content_digest(png);
        if let Some(v) = self.planted_vectors.get(&digest) {
            return v.clone();
        }
        match (self.encoder, imageio::decode_rgb(png)) {
            (MockEncoder::PixelGrid { grid }, Ok(img)) => self.pixel_grid_vector(&img, grid),
            _ => self.hash_vector(&format!("image:{}", encoder.unwrap_or("")), &digest),
        }
    }

    fn text_vector(&self, text: &str) -> Vec<f32> {
        let digest = text_digest(text);
        self.planted_vectors
            .get(&digest)
            .cloned()
            .unwrap_or_else(|| self.hash_vector("text", &digest))
    }

    fn canned_reasoning(&self, visible_digest: &str, mask_digest: &str) -> String {
        let mut rng = rng_from(&[
            b"mock-reason",
            &self.seed.to_le_bytes(),
            visible_digest.as_bytes(),
            mask_digest.as_bytes(),
        ]);
        let subject = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
        let scene = SCENES[rng.random_range(0..SCENES.len())];
        format!("The masked region likely shows {subject}, continuing the pose visible around the mask, in {scene}.")
    }

    fn judge_text(&self, digest: &str) -> String {
        let mut rng = rng_from(&[b"mock-judge", &self.seed.to_le_bytes(), digest.as_bytes()]);
        let mut s = || rng.random_range(8..=20u32);
        let (a, b, c, d) = (s(), s(), s(), s());
        format!(
            "Assessment follows.\n{{\"evidence_grounding\": {a}, \"structural_continuity\": {b}, \
             \"retrieval_discriminativeness\": {c}, \"instruction_format_quality\": {d}, \
             \"rationale\": \"mock judge\"}}"
        )
    }

    async fn enter(
        &self,
        kind: ProviderKind,
        digests: &[&str],
    ) -> Result<InFlight<'_>, ProviderError> {
        *self.stats.calls.lock().unwrap().entry(kind).or_default() += 1;
        let now = self.stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let guard = InFlight(&self.stats.in_flight);
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        if self.unavailable_first > 0
            && self
                .failures_left
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
        {
            return Err(ProviderError::Unavailable("mock transient failure".into()));
        }
        if digests.iter().any(|d| self.poisoned.contains(*d)) {
            return Err(ProviderError::Unavailable("mock poisoned input".into()));
        }
        Ok(guard)
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

fn add_normalized(a: &[f32], b: &[f32]) -> Vec<f32> {
    let norm = |v: &[f32]| {
        v.iter()
            .map(|x| f64::from(*x).powi(2))
            .sum::<f64>()
            .sqrt()
            .max(1e-12)
    };
    let (na, nb) = (norm(a), norm(b));
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) / na + f64::from(*y) / nb) as f32)
        .collect()
}

fn cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum();
    let na = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn decode(bytes: &[u8]) -> Result<RgbImage, ProviderError> {
    imageio::decode_rgb(bytes).map_err(|e| ProviderError::Rejected(e.to_string()))
}

fn encode(img: &RgbImage) -> Result<Vec<u8>, ProviderError> {
    imageio::encode_rgb_png(img).map_err(|e| ProviderError::Malformed(e.to_string()))
}

#[async_trait]
impl ModelBackend for MockWorld {
    fn supports(&self, kind: ProviderKind) -> bool {
        !self.disabled.contains(&kind)
    }

    fn model_id(&self, kind: ProviderKind) -> Option<String> {
        self.supports(kind).then(|| self.model_ids[&kind].clone())
    }

    async fn reason(
        &self,
        image_png: &[u8],
        mask_png: &[u8],
        _instruction: &str,
    ) -> Result<String, ProviderError> {
        let (vd, md) = (content_digest(image_png), content_digest(mask_png));
        let _guard = self.enter(ProviderKind::Reasoning, &[&vd, &md]).await?;
        if let Some(text) = &self.reasoning_override {
            return Ok(text.clone());
        }
        Ok(self
            .planted_reasoning
            .get(&vd)
            .cloned()
            .unwrap_or_else(|| self.canned_reasoning(&vd, &md)))
    }

    async fn embed(
        &self,
        payload: EmbedPayload<'_>,
        encoder: Option<&str>,
    ) -> Result<Vec<f32>, ProviderError> {
        match payload {
            EmbedPayload::Image(png) => {
                let d = content_digest(png);
                let _guard = self.enter(ProviderKind::EmbedImage, &[&d]).await?;
                Ok(self.image_vector(png, encoder))
            }
            EmbedPayload::Text(text) => {
                let d = text_digest(text);
                let _guard = self.enter(ProviderKind::EmbedText, &[&d]).await?;
                Ok(self.text_vector(text))
            }
        }
    }

    async fn compose(&self, visible_png: &[u8], text: &str) -> Result<Vec<f32>, ProviderError> {
        let (vd, td) = (content_digest(visible_png), text_digest(text));
        let _guard = self.enter(ProviderKind::Compose, &[&vd, &td]).await?;
        Ok(add_normalized(
            &self.image_vector(visible_png, None),
            &self.text_vector(text),
        ))
    }

    async fn complete(
        &self,
        masked_png: &[u8],
        mask_png: &[u8],
        reference_png: &[u8],
    ) -> Result<Vec<u8>, ProviderError> {
        let digests = [
            content_digest(masked_png),
            content_digest(mask_png),
            content_digest(reference_png),
        ];
        let _guard = self
            .enter(
                ProviderKind::Complete,
                &[&digests[0], &digests[1], &digests[2]],
            )
            .await?;
        let masked = decode(masked_png)?;
        let mask = Mask::from_png(mask_png).map_err(|e| ProviderError::Rejected(e.to_string()))?;
        let reference = decode(reference_png)?;
        let (w, h) = masked.dimensions();
        match self.completion {
            CompletionBehavior::ReturnReference => encode(&reference),
            CompletionBehavior::WrongSize => {
                encode(&imageops::resize(&reference, w + 1, h, FilterType::Nearest))
            }
            CompletionBehavior::Paste => {
                let reference = if reference.dimensions() == (w, h) {
                    reference
                } else {
                    imageops::resize(&reference, w, h, FilterType::Nearest)
                };
                let mut out = masked;
                for (x, y, px) in out.enumerate_pixels_mut() {
                    if mask.get(x, y) {
                        *px = *reference.get_pixel(x, y);
                    }
                }
                encode(&out)
            }
        }
    }

    async fn perceptual(
        &self,
        a_png: &[u8],
        b_png: &[u8],
        metric: PerceptualMetric,
    ) -> Result<f64, ProviderError> {
        let (da, db) = (content_digest(a_png), content_digest(b_png));
        let _guard = self.enter(ProviderKind::Perceptual, &[&da, &db]).await?;
        let (a, b) = (decode(a_png)?, decode(b_png)?);
        let cos = cosine_f32(
            &self.pixel_grid_vector(&a, 4),
            &self.pixel_grid_vector(&b, 4),
        );
        let distance = (1.0 - cos) / 2.0;
        Ok(match metric {
            PerceptualMetric::Lpips => distance,
            PerceptualMetric::Dreamsim => 0.8 * distance,
        })
    }

    async fn judge(&self, image_png: &[u8], prompt: &str) -> Result<String, ProviderError> {
        let digest = {
            let mut h = Sha256::new();
            h.update(content_digest(image_png));
            h.update(prompt.as_bytes());
            hex::encode(h.finalize())
        };
        let _guard = self.enter(ProviderKind::Judge, &[&digest]).await?;
        match self.judge {
            JudgeBehavior::HashScores => Ok(self.judge_text(&digest)),
            JudgeBehavior::Prose => Ok("The instruction is reasonably grounded.".into()),
            JudgeBehavior::ProseOnce => {
                if self.prose_seen.lock().unwrap().insert(digest.clone()) {
                    Ok("Let me think about this instruction first.".into())
                } else {
                    Ok(self.judge_text(&digest))
                }
            }
        }
    }
}
