//! Dataset construction: person-box filtering, identity clustering, album
//! formation around the dominant identity, and human-centric mask/query
//! generation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingError, EmbeddingSource, EmbeddingStore, EmbeddingVector};
use crate::index::cosine;
use crate::mask::{compute_mask_ratio, Bucket, Mask, MaskError};
use crate::model::{Album, ImageRecord, Manifest, ManifestError, MaskSpec, PixelBox, QueryCase};
use crate::seed::{derive_seed, rng_from};

/// Boxes below this fraction (in percent) of both image sides are discarded.
pub const MIN_BOX_PERCENT: u64 = 15;
/// Images with more surviving people than this are dropped as crowded.
pub const MAX_PEOPLE: usize = 20;
pub const DEFAULT_CLUSTER_THRESHOLD: f64 = 0.45;
pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 0.6;
pub const MASK_ATTEMPTS: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("face embeddings disagree on dimension: {expected} vs {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("no identity clusters to choose from")]
    EmptyInput,
    #[error("no ground-truth embedding for image {0}")]
    MissingEmbedding(String),
    #[error("invalid raw manifest: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MaskGenError {
    #[error("image {0} has no person box to anchor a mask")]
    NoPerson(String),
    #[error("could not place a {bucket} mask on image {image_id}")]
    BucketUnreachable { image_id: String, bucket: Bucket },
}

// ---------------------------------------------------------------------------
// Step 1: filtering

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NoSignificantPerson,
    Crowded,
}

impl std::fmt::Display for DropReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DropReason::NoSignificantPerson => "no significant person",
            DropReason::Crowded => "crowded",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedImage {
    pub image_id: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterOutcome {
    pub kept: Vec<ImageRecord>,
    pub dropped: Vec<DroppedImage>,
}

/// A box is insignificant only when both its width and height fall below
/// 15% of the corresponding image side. Integer arithmetic keeps the
/// boundary exact.
pub fn is_significant(b: &PixelBox, width: u32, height: u32) -> bool {
    100 * u64::from(b.w) >= MIN_BOX_PERCENT * u64::from(width)
        || 100 * u64::from(b.h) >= MIN_BOX_PERCENT * u64::from(height)
}

pub fn filter_images(records: &[ImageRecord]) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for rec in records {
        let boxes: Vec<PixelBox> = rec
            .person_boxes
            .iter()
            .copied()
            .filter(|b| is_significant(b, rec.width, rec.height))
            .collect();
        let reason = if boxes.is_empty() {
            Some(DropReason::NoSignificantPerson)
        } else if boxes.len() > MAX_PEOPLE {
            Some(DropReason::Crowded)
        } else {
            None
        };
        match reason {
            Some(reason) => out.dropped.push(DroppedImage {
                image_id: rec.image_id.clone(),
                reason,
            }),
            None => out.kept.push(ImageRecord {
                person_boxes: boxes,
                ..rec.clone()
            }),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Step 2: identity clustering

#[derive(Debug, Clone, PartialEq)]
pub struct FaceObservation {
    pub image_id: String,
    pub face_box: PixelBox,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCluster {
    pub identity_id: String,
    pub members: Vec<FaceObservation>,
    pub image_ids: BTreeSet<String>,
}

/// Greedy single-link clustering in input order: each face joins the first
/// cluster holding any member with cosine ≥ `threshold`, otherwise it opens
/// a new cluster. Cluster ids are `id0000`, `id0001`, ... in creation order.
pub fn cluster_identities(
    faces: &[FaceObservation],
    threshold: f64,
) -> Result<Vec<IdentityCluster>, PipelineError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(PipelineError::InvalidThreshold(threshold));
    }
    if let Some(first) = faces.first() {
        let dim = first.embedding.dim();
        if let Some(bad) = faces.iter().find(|f| f.embedding.dim() != dim) {
            return Err(PipelineError::DimensionMismatch {
                expected: dim,
                got: bad.embedding.dim(),
            });
        }
    }
    let mut clusters: Vec<IdentityCluster> = Vec::new();
    for face in faces {
        let home = clusters.iter().position(|c| {
            c.members
                .iter()
                .any(|m| cosine(&m.embedding, &face.embedding).is_ok_and(|s| s >= threshold))
        });
        let idx = home.unwrap_or_else(|| {
            clusters.push(IdentityCluster {
                identity_id: format!("id{:04}", clusters.len()),
                members: Vec::new(),
                image_ids: BTreeSet::new(),
            });
            clusters.len() - 1
        });
        clusters[idx].members.push(face.clone());
        clusters[idx].image_ids.insert(face.image_id.clone());
    }
    Ok(clusters)
}

/// The cluster seen in the most distinct images; ties go to the
/// lexicographically smallest identity id.
pub fn select_dominant_identity(clusters: &[IdentityCluster]) -> Result<&str, PipelineError> {
    clusters
        .iter()
        .max_by(|a, b| {
            a.image_ids
                .len()
                .cmp(&b.image_ids.len())
                .then_with(|| b.identity_id.cmp(&a.identity_id))
        })
        .map(|c| c.identity_id.as_str())
        .ok_or(PipelineError::EmptyInput)
}

// ---------------------------------------------------------------------------
// Step 3: masks

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedMask {
    pub raster: Mask,
    pub ratio: f64,
    pub bucket: Bucket,
    pub anchor: PixelBox,
    pub shapes: usize,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    ellipse: bool,
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
}

impl Shape {
    /// Occluded pixel columns `[x0, x1)` on row `y` at scale `t`.
    fn span(&self, y: u32, t: f64, width: u32) -> Option<(u32, u32)> {
        let (a, b) = (self.half_w * t, self.half_h * t);
        if a <= 0.0 || b <= 0.0 {
            return None;
        }
        let dy = (f64::from(y) + 0.5 - self.cy) / b;
        if dy.abs() > 1.0 {
            return None;
        }
        let half = if self.ellipse {
            a * (1.0 - dy * dy).sqrt()
        } else {
            a
        };
        // pixel x is covered when its centre x + 0.5 lies in [cx - half, cx + half]
        let x0 = (self.cx - half - 0.5).ceil().max(0.0);
        let x1 = (self.cx + half - 0.5).floor() + 1.0;
        let x1 = x1.min(f64::from(width));
        (x1 > x0).then_some((x0 as u32, x1 as u32))
    }
}

fn row_union(shapes: &[Shape], y: u32, t: f64, width: u32) -> Vec<(u32, u32)> {
    let mut spans: Vec<(u32, u32)> = shapes.iter().filter_map(|s| s.span(y, t, width)).collect();
    spans.sort_unstable();
    let mut merged: Vec<(u32, u32)> = Vec::with_capacity(spans.len());
    for (a, b) in spans {
        match merged.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    merged
}

/// (total occluded pixels, occluded pixels inside `anchor`) at scale `t`.
fn coverage(shapes: &[Shape], t: f64, width: u32, height: u32, anchor: &PixelBox) -> (u64, u64) {
    let (bx0, bx1) = (anchor.x, anchor.x + anchor.w);
    let (by0, by1) = (anchor.y, anchor.y + anchor.h);
    let mut total = 0u64;
    let mut inside = 0u64;
    for y in 0..height {
        for (a, b) in row_union(shapes, y, t, width) {
            total += u64::from(b - a);
            if (by0..by1).contains(&y) {
                let (lo, hi) = (a.max(bx0), b.min(bx1));
                if hi > lo {
                    inside += u64::from(hi - lo);
                }
            }
        }
    }
    (total, inside)
}

fn target_range(bucket: Bucket) -> (f64, f64) {
    match bucket {
        Bucket::Small => (0.04, 0.18),
        Bucket::Medium => (0.22, 0.48),
        Bucket::Large => (0.53, 0.85),
    }
}

/// Places a union of 1–4 rectangles and ellipses on a randomly chosen
/// person box so that the mask ratio lands in `bucket` and at least half of
/// the mask lies inside that box. Deterministic in `(record, bucket, seed)`.
pub fn generate_mask(
    record: &ImageRecord,
    bucket: Bucket,
    seed: u64,
) -> Result<GeneratedMask, MaskGenError> {
    if record.person_boxes.is_empty() {
        return Err(MaskGenError::NoPerson(record.image_id.clone()));
    }
    let (width, height) = (record.width, record.height);
    let area = f64::from(width) * f64::from(height);
    let (lo, hi) = target_range(bucket);
    let unreachable = || MaskGenError::BucketUnreachable {
        image_id: record.image_id.clone(),
        bucket,
    };
    // At most twice the anchor area can be occluded with half of it inside.
    let feasible = |b: &PixelBox| (2.0 * b.area() as f64 / area).min(1.0) * 0.95;
    let anchors: Vec<PixelBox> = record
        .person_boxes
        .iter()
        .copied()
        .filter(|b| b.area() > 0 && feasible(b) > lo)
        .collect();
    if anchors.is_empty() {
        return Err(unreachable());
    }
    let mut rng = rng_from(&[
        b"mask",
        record.image_id.as_bytes(),
        bucket.as_str().as_bytes(),
        &seed.to_le_bytes(),
    ]);
    for _ in 0..MASK_ATTEMPTS {
        let anchor = anchors[rng.random_range(0..anchors.len())];
        let target = rng.random_range(lo..hi.min(feasible(&anchor)));
        let target_px = (target * area).ceil() as u64;
        let n_shapes = rng.random_range(1..=4usize);
        let (bw, bh) = (f64::from(anchor.w), f64::from(anchor.h));
        let shapes: Vec<Shape> = (0..n_shapes)
            .map(|_| Shape {
                ellipse: rng.random_bool(0.5),
                cx: f64::from(anchor.x) + bw * rng.random_range(0.25..0.75),
                cy: f64::from(anchor.y) + bh * rng.random_range(0.25..0.75),
                half_w: bw * rng.random_range(0.15..0.5),
                half_h: bh * rng.random_range(0.15..0.5),
            })
            .collect();

        let mut t_hi = 1.0;
        while coverage(&shapes, t_hi, width, height, &anchor).0 < target_px {
            t_hi *= 2.0;
            if t_hi > 1e4 {
                break;
            }
        }
        let mut t_lo = 0.0;
        for _ in 0..40 {
            let mid = 0.5 * (t_lo + t_hi);
            if coverage(&shapes, mid, width, height, &anchor).0 >= target_px {
                t_hi = mid;
            } else {
                t_lo = mid;
            }
        }
        let (total, inside) = coverage(&shapes, t_hi, width, height, &anchor);
        let ratio = total as f64 / area;
        if total == 0 || ratio >= 1.0 || !bucket.contains(ratio) || 2 * inside < total {
            continue;
        }
        let mut raster = Mask::new(width, height);
        for y in 0..height {
            for (a, b) in row_union(&shapes, y, t_hi, width) {
                raster.fill_span(y, a, b);
            }
        }
        let ratio = compute_mask_ratio(&raster).expect("non-empty raster");
        return Ok(GeneratedMask {
            raster,
            ratio,
            bucket,
            anchor,
            shapes: n_shapes,
        });
    }
    Err(unreachable())
}

// ---------------------------------------------------------------------------
// Step 3: query cases

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGenConfig {
    pub relevance_threshold: f64,
    pub masks_per_image: usize,
    /// Fixed bucket for every mask; drawn uniformly per mask when `None`.
    pub bucket: Option<Bucket>,
}

impl Default for QueryGenConfig {
    fn default() -> Self {
        Self {
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
            masks_per_image: 1,
            bucket: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedQuery {
    pub case: QueryCase,
    pub raster: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedMask {
    pub image_id: String,
    pub bucket: Bucket,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryBuildOutcome {
    pub queries: Vec<GeneratedQuery>,
    pub skipped: Vec<SkippedMask>,
}

/// Replaces characters that are unsafe in file names.
pub fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Images whose ground-truth embedding is within `threshold` cosine of the
/// target, excluding the target, in album order.
pub fn relevant_set(
    album: &Album,
    target: &str,
    gt: &EmbeddingStore,
    threshold: f64,
) -> Result<Vec<String>, PipelineError> {
    let tv = gt
        .get(target)
        .ok_or_else(|| PipelineError::MissingEmbedding(target.to_string()))?;
    let mut out = Vec::new();
    for id in album.image_ids.iter().filter(|id| *id != target) {
        let v = gt
            .get(id)
            .ok_or_else(|| PipelineError::MissingEmbedding(id.clone()))?;
        if cosine(v, tv).is_ok_and(|s| s >= threshold) {
            out.push(id.clone());
        }
    }
    Ok(out)
}

/// Emits `masks_per_image` query cases for every album image. Cases with an
/// empty relevant set are flagged unjudgeable; masks that cannot reach their
/// bucket are reported in `skipped`.
pub fn build_query_cases(
    album: &Album,
    records: &[ImageRecord],
    gt: &EmbeddingStore,
    config: &QueryGenConfig,
    seed: u64,
) -> Result<QueryBuildOutcome, PipelineError> {
    let by_id: HashMap<&str, &ImageRecord> =
        records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    for id in &album.image_ids {
        if gt.get(id).is_none() {
            return Err(PipelineError::MissingEmbedding(id.clone()));
        }
    }
    let mut out = QueryBuildOutcome::default();
    for target in &album.image_ids {
        let record = by_id.get(target.as_str()).ok_or_else(|| {
            PipelineError::InvalidInput(format!("album image {target} has no record"))
        })?;
        let relevant = relevant_set(album, target, gt, config.relevance_threshold)?;
        for j in 0..config.masks_per_image {
            let j_bytes = (j as u64).to_le_bytes();
            let parts: [&[u8]; 4] = [&seed.to_le_bytes(), target.as_bytes(), &j_bytes, b"query"];
            let bucket = config
                .bucket
                .unwrap_or_else(|| Bucket::ALL[rng_from(&parts).random_range(0..3)]);
            let mask_seed =
                derive_seed(&[&seed.to_le_bytes(), target.as_bytes(), &j_bytes, b"mask"]);
            match generate_mask(record, bucket, mask_seed) {
                Ok(mask) => {
                    let query_id = file_safe(&format!("{}-{}-m{}", album.album_id, target, j));
                    out.queries.push(GeneratedQuery {
                        case: QueryCase {
                            mask: MaskSpec {
                                mask_ref: format!("masks/{query_id}.png"),
                                mask_area_ratio: mask.ratio,
                                bucket: mask.bucket,
                            },
                            query_id,
                            album_id: album.album_id.clone(),
                            target_image_id: target.clone(),
                            unjudgeable: relevant.is_empty(),
                            relevant_ids: relevant.clone(),
                            reasoning_text: None,
                        },
                        raster: mask.raster,
                    });
                }
                Err(e) => out.skipped.push(SkippedMask {
                    image_id: target.clone(),
                    bucket,
                    reason: e.to_string(),
                }),
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Whole pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub boxes: Vec<PixelBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFace {
    pub image_id: String,
    pub face_box: PixelBox,
    pub values: Vec<f32>,
}

/// A source collection (e.g. one personal event album) before identity
/// filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAlbum {
    pub album_id: String,
    pub image_ids: Vec<String>,
}

/// Input to [`run_pipeline`]: the manifest schema with albums optional plus
/// detector and face-encoder outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawManifest {
    pub version: u32,
    #[serde(default = "crate::pipeline::default_dim")]
    pub embedding_dim: usize,
    pub images: Vec<ImageRecord>,
    #[serde(default)]
    pub albums: Option<Vec<RawAlbum>>,
    #[serde(default)]
    pub detections: Vec<Detection>,
    #[serde(default)]
    pub faces: Vec<RawFace>,
}

fn default_dim() -> usize {
    crate::model::DEFAULT_EMBEDDING_DIM
}

/// Collection id used when the raw manifest carries no albums.
pub const DEFAULT_COLLECTION: &str = "album";

impl RawManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::InvalidInput(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub cluster_threshold: f64,
    pub query: QueryGenConfig,
    /// Worker threads for per-album stages; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cluster_threshold: DEFAULT_CLUSTER_THRESHOLD,
            query: QueryGenConfig::default(),
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedAlbum {
    pub album_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PipelineReport {
    pub images_in: usize,
    pub images_kept: usize,
    pub dropped_by_reason: BTreeMap<String, usize>,
    pub faces_in: usize,
    pub albums_in: usize,
    pub albums_formed: usize,
    pub albums_dropped: Vec<DroppedAlbum>,
    /// Distinct-image counts per identity cluster, per source album.
    pub cluster_sizes: BTreeMap<String, Vec<usize>>,
    pub images_out: usize,
    pub mean_album_size: f64,
    pub queries: usize,
    pub unjudgeable_queries: usize,
    pub queries_by_bucket: BTreeMap<String, usize>,
    pub masks_skipped: Vec<SkippedMask>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub manifest: Manifest,
    pub embeddings: EmbeddingStore,
    pub masks: Vec<(String, Mask)>,
    pub report: PipelineReport,
}

struct AlbumOutcome {
    album: Option<Album>,
    dropped: Option<String>,
    cluster_sizes: Vec<usize>,
    queries: QueryBuildOutcome,
}

fn process_album(
    collection: &RawAlbum,
    kept: &HashMap<&str, &ImageRecord>,
    faces: &[FaceObservation],
    gt: &EmbeddingStore,
    config: &PipelineConfig,
) -> Result<AlbumOutcome, PipelineError> {
    let members: Vec<&str> = collection
        .image_ids
        .iter()
        .map(String::as_str)
        .filter(|id| kept.contains_key(id))
        .collect();
    let member_set: HashSet<&str> = members.iter().copied().collect();
    let album_faces: Vec<FaceObservation> = faces
        .iter()
        .filter(|f| member_set.contains(f.image_id.as_str()))
        .cloned()
        .collect();
    let clusters = cluster_identities(&album_faces, config.cluster_threshold)?;
    let mut cluster_sizes: Vec<usize> = clusters.iter().map(|c| c.image_ids.len()).collect();
    cluster_sizes.sort_unstable_by(|a, b| b.cmp(a));
    let dropped = |reason: &str| AlbumOutcome {
        album: None,
        dropped: Some(reason.to_string()),
        cluster_sizes: cluster_sizes.clone(),
        queries: QueryBuildOutcome::default(),
    };
    let Ok(dominant) = select_dominant_identity(&clusters) else {
        return Ok(dropped("no faces"));
    };
    let cluster = clusters
        .iter()
        .find(|c| c.identity_id == dominant)
        .expect("dominant exists");
    let image_ids: Vec<String> = members
        .iter()
        .filter(|id| cluster.image_ids.contains(**id))
        .map(|id| id.to_string())
        .collect();
    if image_ids.len() < 2 {
        return Ok(dropped("fewer than 2 images of the dominant identity"));
    }
    let album = Album {
        album_id: collection.album_id.clone(),
        dominant_identity: format!("{}/{}", collection.album_id, dominant),
        image_ids,
    };
    let records: Vec<ImageRecord> = album
        .image_ids
        .iter()
        .map(|id| (*kept[id.as_str()]).clone())
        .collect();
    let album_seed = derive_seed(&[collection.album_id.as_bytes(), &config.seed.to_le_bytes()]);
    let queries = build_query_cases(&album, &records, gt, &config.query, album_seed)?;
    Ok(AlbumOutcome {
        album: Some(album),
        dropped: None,
        cluster_sizes,
        queries,
    })
}

/// Runs filtering, clustering, album formation and query generation.
/// Output is identical for identical inputs regardless of `threads`.
pub fn run_pipeline(
    raw: &RawManifest,
    gt: &EmbeddingStore,
    config: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    if raw.version != crate::model::MANIFEST_VERSION {
        return Err(PipelineError::InvalidInput(format!(
            "unsupported version {}",
            raw.version
        )));
    }
    if gt.dim() != raw.embedding_dim {
        return Err(PipelineError::InvalidInput(format!(
            "embedding store has dim {}, manifest says {}",
            gt.dim(),
            raw.embedding_dim
        )));
    }

    let mut images = raw.images.clone();
    let mut position: HashMap<String, usize> = HashMap::new();
    for (i, img) in images.iter().enumerate() {
        if position.insert(img.image_id.clone(), i).is_some() {
            return Err(PipelineError::InvalidInput(format!(
                "duplicate image_id {}",
                img.image_id
            )));
        }
    }
    for det in &raw.detections {
        let i = *position.get(&det.image_id).ok_or_else(|| {
            PipelineError::InvalidInput(format!("detection for unknown image {}", det.image_id))
        })?;
        images[i].person_boxes = det.boxes.clone();
    }
    for img in &images {
        if img.width == 0 || img.height == 0 {
            return Err(PipelineError::InvalidInput(format!(
                "image {} has zero size",
                img.image_id
            )));
        }
        if img
            .person_boxes
            .iter()
            .any(|b| !b.fits_within(img.width, img.height))
        {
            return Err(PipelineError::InvalidInput(format!(
                "image {} has a box outside its bounds",
                img.image_id
            )));
        }
    }
    let mut faces = Vec::with_capacity(raw.faces.len());
    for f in &raw.faces {
        let img = position
            .get(&f.image_id)
            .map(|&i| &images[i])
            .ok_or_else(|| {
                PipelineError::InvalidInput(format!("face for unknown image {}", f.image_id))
            })?;
        if !f.face_box.fits_within(img.width, img.height) {
            return Err(PipelineError::InvalidInput(format!(
                "face box outside image {}",
                f.image_id
            )));
        }
        faces.push(FaceObservation {
            image_id: f.image_id.clone(),
            face_box: f.face_box,
            embedding: EmbeddingVector::normalized(&f.values, EmbeddingSource::Image)?,
        });
    }

    let filtered = filter_images(&images);
    let kept: HashMap<&str, &ImageRecord> = filtered
        .kept
        .iter()
        .map(|r| (r.image_id.as_str(), r))
        .collect();

    let collections: Vec<RawAlbum> = match &raw.albums {
        Some(albums) => albums.clone(),
        None => vec![RawAlbum {
            album_id: DEFAULT_COLLECTION.to_string(),
            image_ids: images.iter().map(|i| i.image_id.clone()).collect(),
        }],
    };
    let mut owner: HashMap<&str, &str> = HashMap::new();
    for c in &collections {
        for id in &c.image_ids {
            if !position.contains_key(id) {
                return Err(PipelineError::InvalidInput(format!(
                    "album {} lists unknown image {id}",
                    c.album_id
                )));
            }
            if let Some(prev) = owner.insert(id, &c.album_id) {
                return Err(PipelineError::InvalidInput(format!(
                    "image {id} in albums {prev} and {}",
                    c.album_id
                )));
            }
        }
    }

    let work = || -> Result<Vec<AlbumOutcome>, PipelineError> {
        collections
            .par_iter()
            .map(|c| process_album(c, &kept, &faces, gt, config))
            .collect()
    };
    let outcomes = match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| PipelineError::InvalidInput(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let mut report = PipelineReport {
        images_in: raw.images.len(),
        images_kept: filtered.kept.len(),
        faces_in: raw.faces.len(),
        albums_in: collections.len(),
        ..Default::default()
    };
    for d in &filtered.dropped {
        *report
            .dropped_by_reason
            .entry(d.reason.to_string())
            .or_default() += 1;
    }

    let mut albums = Vec::new();
    let mut identity_of: HashMap<String, String> = HashMap::new();
    let mut queries = Vec::new();
    let mut masks = Vec::new();
    for (c, outcome) in collections.iter().zip(outcomes) {
        report
            .cluster_sizes
            .insert(c.album_id.clone(), outcome.cluster_sizes);
        if let Some(reason) = outcome.dropped {
            report.albums_dropped.push(DroppedAlbum {
                album_id: c.album_id.clone(),
                reason,
            });
        }
        if let Some(album) = outcome.album {
            for id in &album.image_ids {
                identity_of.insert(id.clone(), album.dominant_identity.clone());
            }
            albums.push(album);
        }
        report.masks_skipped.extend(outcome.queries.skipped);
        for q in outcome.queries.queries {
            masks.push((q.case.mask.mask_ref.clone(), q.raster));
            queries.push(q.case);
        }
    }

    let out_images: Vec<ImageRecord> = filtered
        .kept
        .iter()
        .filter_map(|r| {
            identity_of.get(&r.image_id).map(|identity| ImageRecord {
                identity_id: Some(identity.clone()),
                ..r.clone()
            })
        })
        .collect();
    let embeddings = gt.subset(out_images.iter().map(|r| r.image_id.as_str()));

    report.albums_formed = albums.len();
    report.images_out = out_images.len();
    report.mean_album_size = if albums.is_empty() {
        0.0
    } else {
        albums.iter().map(|a| a.image_ids.len()).sum::<usize>() as f64 / albums.len() as f64
    };
    report.queries = queries.len();
    report.unjudgeable_queries = queries.iter().filter(|q| q.unjudgeable).count();
    for q in &queries {
        *report
            .queries_by_bucket
            .entry(q.mask.bucket.to_string())
            .or_default() += 1;
    }

    let manifest = Manifest::new(raw.embedding_dim, out_images, albums, queries)?;
    Ok(PipelineOutput {
        manifest,
        embeddings,
        masks,
        report,
    })
}

/// Writes `manifest.json`, `embeddings.bin`, `masks/*.png` and
/// `pipeline_report.json` under `dir`.
pub fn write_pipeline_output(output: &PipelineOutput, dir: &Path) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: dir.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir.join("masks")).map_err(io)?;
    crate::model::save_manifest(&output.manifest, &dir.join("manifest.json"))?;
    output.embeddings.save(&dir.join("embeddings.bin"))?;
    for (rel, mask) in &output.masks {
        mask.save(&dir.join(rel))?;
    }
    let mut report = serde_json::to_string_pretty(&output.report).expect("report serialises");
    report.push('\n');
    std::fs::write(dir.join("pipeline_report.json"), report).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, w: u32, h: u32, boxes: &[[u32; 4]]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            file_ref: format!("{id}.png"),
            width: w,
            height: h,
            person_boxes: boxes.iter().map(|&b| b.into()).collect(),
            identity_id: None,
        }
    }

    fn face(id: &str, v: &[f32]) -> FaceObservation {
        FaceObservation {
            image_id: id.into(),
            face_box: PixelBox::new(0, 0, 1, 1),
            embedding: EmbeddingVector::normalized(v, EmbeddingSource::Image).unwrap(),
        }
    }

    #[test]
    fn small_box_dropped() {
        let out = filter_images(&[record("a", 1000, 800, &[[0, 0, 120, 90]])]);
        assert!(out.kept.is_empty());
        assert_eq!(out.dropped[0].reason, DropReason::NoSignificantPerson);
        assert_eq!(out.dropped[0].reason.to_string(), "no significant person");
    }

    #[test]
    fn crowded_dropped() {
        let boxes: Vec<[u32; 4]> = (0..21).map(|i| [i * 10, 0, 200, 200]).collect();
        let out = filter_images(&[record("a", 1000, 800, &boxes)]);
        assert_eq!(out.dropped[0].reason, DropReason::Crowded);
        let boxes: Vec<[u32; 4]> = (0..20).map(|i| [i * 10, 0, 200, 200]).collect();
        assert_eq!(
            filter_images(&[record("a", 1000, 800, &boxes)]).kept.len(),
            1
        );
    }

    #[test]
    fn exact_threshold_box_kept() {
        let out = filter_images(&[record("a", 1000, 800, &[[0, 0, 150, 10]])]);
        assert_eq!(out.kept.len(), 1);
        let out = filter_images(&[record("a", 1000, 800, &[[0, 0, 10, 120]])]);
        assert_eq!(out.kept.len(), 1);
        let out = filter_images(&[record("a", 1000, 800, &[[0, 0, 149, 119]])]);
        assert!(out.kept.is_empty());
    }

    #[test]
    fn insignificant_boxes_removed_from_kept() {
        let out = filter_images(&[record("a", 100, 100, &[[0, 0, 50, 50], [0, 0, 2, 2]])]);
        assert_eq!(out.kept[0].person_boxes, vec![PixelBox::new(0, 0, 50, 50)]);
        let again = filter_images(&out.kept);
        assert_eq!(again.kept, out.kept);
        assert!(again.dropped.is_empty());
    }

    #[test]
    fn clustering_examples() {
        // all pairwise cos = 0.9 is not exactly reachable in 2D for three
        // vectors, so use near-identical directions
        let faces = [
            face("a", &[1.0, 0.0]),
            face("b", &[0.95, 0.31]),
            face("c", &[0.95, -0.31]),
        ];
        let c = cluster_identities(&faces, 0.45).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members.len(), 3);

        let c =
            cluster_identities(&[face("a", &[1.0, 0.0]), face("b", &[0.0, 1.0])], 0.45).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn single_link_chaining() {
        // A·B = 0.5, B·C = 0.5, A·C = 0.1 (vectors in R^3)
        let a = [1.0f32, 0.0, 0.0];
        let b = [0.5f32, 0.866_025_4, 0.0];
        let cx = 0.1f32;
        let cy = (0.5 - 0.5 * cx) / 0.866_025_4;
        let cz = (1.0 - cx * cx - cy * cy).sqrt();
        let c = [cx, cy, cz];
        let faces = [face("A", &a), face("B", &b), face("C", &c)];
        let dot =
            |x: &FaceObservation, y: &FaceObservation| cosine(&x.embedding, &y.embedding).unwrap();
        assert!((dot(&faces[0], &faces[1]) - 0.5).abs() < 1e-5);
        assert!((dot(&faces[1], &faces[2]) - 0.5).abs() < 1e-5);
        assert!((dot(&faces[0], &faces[2]) - 0.1).abs() < 1e-5);
        let clusters = cluster_identities(&faces, 0.45).unwrap();
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].image_ids.len(), 3);
    }

    #[test]
    fn clustering_errors() {
        assert!(matches!(
            cluster_identities(&[face("a", &[1.0, 0.0]), face("b", &[1.0, 0.0, 0.0])], 0.45),
            Err(PipelineError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cluster_identities(&[], 1.0),
            Err(PipelineError::InvalidThreshold(_))
        ));
    }

    fn cluster(id: &str, n: usize) -> IdentityCluster {
        IdentityCluster {
            identity_id: id.into(),
            members: vec![],
            image_ids: (0..n).map(|i| format!("{id}{i}")).collect(),
        }
    }

    #[test]
    fn dominant_identity() {
        assert_eq!(
            select_dominant_identity(&[cluster("A", 5), cluster("B", 3)]).unwrap(),
            "A"
        );
        assert_eq!(
            select_dominant_identity(&[cluster("B", 4), cluster("A", 4)]).unwrap(),
            "A"
        );
        assert_eq!(select_dominant_identity(&[cluster("Z", 1)]).unwrap(), "Z");
        assert!(matches!(
            select_dominant_identity(&[]),
            Err(PipelineError::EmptyInput)
        ));
    }

    #[test]
    fn mask_is_deterministic_and_in_bucket() {
        let rec = record("img", 100, 100, &[[10, 10, 80, 80]]);
        let a = generate_mask(&rec, Bucket::Medium, 7).unwrap();
        let b = generate_mask(&rec, Bucket::Medium, 7).unwrap();
        assert_eq!(a.raster.to_png().unwrap(), b.raster.to_png().unwrap());
        // count pixels of the emitted raster directly
        let total = a.raster.bits().iter().filter(|&&v| v == 1).count();
        let inside = (10..90)
            .flat_map(|y| (10..90).map(move |x| (x, y)))
            .filter(|&(x, y)| a.raster.get(x, y))
            .count();
        let ratio = total as f64 / 10_000.0;
        assert!((0.20..=0.50).contains(&ratio), "ratio {ratio}");
        assert!(2 * inside >= total);
        let small = generate_mask(&rec, Bucket::Small, 3).unwrap();
        assert!(compute_mask_ratio(&small.raster).unwrap() < 0.20);
    }

    #[test]
    fn mask_errors() {
        let rec = record("img", 100, 100, &[]);
        assert!(matches!(
            generate_mask(&rec, Bucket::Small, 0),
            Err(MaskGenError::NoPerson(_))
        ));
        let tiny = record("img", 100, 100, &[[0, 0, 10, 10]]);
        assert!(matches!(
            generate_mask(&tiny, Bucket::Large, 0),
            Err(MaskGenError::BucketUnreachable { .. })
        ));
    }

    fn gt(vs: &[(&str, &[f32])]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new(vs[0].1.len());
        for (id, v) in vs {
            s.insert(
                *id,
                EmbeddingVector::normalized(v, EmbeddingSource::Image).unwrap(),
            )
            .unwrap();
        }
        s
    }

    #[test]
    fn two_image_album_relevance() {
        let album = Album {
            album_id: "al".into(),
            dominant_identity: "p".into(),
            image_ids: vec!["a".into(), "b".into()],
        };
        let recs = [
            record("a", 64, 64, &[[8, 8, 48, 48]]),
            record("b", 64, 64, &[[8, 8, 48, 48]]),
        ];
        // cos = 0.9
        let store = gt(&[("a", &[1.0, 0.0]), ("b", &[0.9, 0.435_889_9])]);
        let cfg = QueryGenConfig {
            relevance_threshold: 0.5,
            ..Default::default()
        };
        let out = build_query_cases(&album, &recs, &store, &cfg, 1).unwrap();
        assert_eq!(out.queries.len(), 2);
        assert_eq!(out.queries[0].case.relevant_ids, ["b"]);
        assert_eq!(out.queries[1].case.relevant_ids, ["a"]);
        assert!(out.queries.iter().all(|q| !q.case.unjudgeable));

        let cfg = QueryGenConfig {
            relevance_threshold: 1.1,
            ..Default::default()
        };
        let out = build_query_cases(&album, &recs, &store, &cfg, 1).unwrap();
        assert!(out
            .queries
            .iter()
            .all(|q| q.case.unjudgeable && q.case.relevant_ids.is_empty()));

        let partial = gt(&[("a", &[1.0, 0.0])]);
        assert!(matches!(
            build_query_cases(&album, &recs, &partial, &cfg, 1),
            Err(PipelineError::MissingEmbedding(_))
        ));
    }
}
