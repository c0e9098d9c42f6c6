//! Album dataset model and the `manifest.json` format.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::mask::{bucket_of, compute_mask_ratio, Bucket, Mask, MaskError};

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_EMBEDDING_DIM: usize = 768;
const RATIO_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid record {record}: {reason}")]
    Validation { record: String, reason: String },
}

impl ManifestError {
    fn invalid(record: impl Into<String>, reason: impl Into<String>) -> Self {
        ManifestError::Validation {
            record: record.into(),
            reason: reason.into(),
        }
    }
}

/// Axis-aligned box `(x, y, w, h)` in pixels. Serialised as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct PixelBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        u64::from(self.x) + u64::from(self.w) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(height)
    }
}

impl From<[u32; 4]> for PixelBox {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<PixelBox> for [u32; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub file_ref: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub person_boxes: Vec<PixelBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Album {
    pub album_id: String,
    pub dominant_identity: String,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mask_ref: String,
    pub mask_area_ratio: f64,
    pub bucket: Bucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCase {
    pub query_id: String,
    pub album_id: String,
    pub target_image_id: String,
    pub mask: MaskSpec,
    pub relevant_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_text: Option<String>,
    /// Set when no album image qualifies as relevant; such cases are kept
    /// for completion but excluded from retrieval metrics.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unjudgeable: bool,
}

impl QueryCase {
    pub fn is_judgeable(&self) -> bool {
        !self.unjudgeable && !self.relevant_ids.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    version: u32,
    #[serde(default = "default_dim")]
    embedding_dim: usize,
    images: Vec<ImageRecord>,
    albums: Vec<Album>,
    #[serde(default)]
    queries: Vec<QueryCase>,
}

fn default_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

/// A validated dataset manifest. Immutable once built.
#[derive(Debug, Clone)]
pub struct Manifest {
    embedding_dim: usize,
    images: Vec<ImageRecord>,
    albums: Vec<Album>,
    queries: Vec<QueryCase>,
    image_index: HashMap<String, usize>,
    album_index: HashMap<String, usize>,
    query_index: HashMap<String, usize>,
}

impl PartialEq for Manifest {
    fn eq(&self, other: &Self) -> bool {
        self.embedding_dim == other.embedding_dim
            && self.images == other.images
            && self.albums == other.albums
            && self.queries == other.queries
    }
}

impl Manifest {
    /// Checks every structural invariant that does not need mask files.
    pub fn new(
        embedding_dim: usize,
        images: Vec<ImageRecord>,
        albums: Vec<Album>,
        queries: Vec<QueryCase>,
    ) -> Result<Self, ManifestError> {
        if embedding_dim == 0 {
            return Err(ManifestError::invalid("embedding_dim", "must be positive"));
        }
        let mut image_index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            validate_image(img)?;
            if image_index.insert(img.image_id.clone(), i).is_some() {
                return Err(ManifestError::invalid(
                    format!("image {}", img.image_id),
                    "duplicate image_id",
                ));
            }
        }
        let mut album_index = HashMap::with_capacity(albums.len());
        for (i, album) in albums.iter().enumerate() {
            let rec = || format!("album {}", album.album_id);
            if album.image_ids.len() < 2 {
                return Err(ManifestError::invalid(rec(), "needs at least 2 images"));
            }
            let mut seen = HashSet::new();
            for id in &album.image_ids {
                if !seen.insert(id) {
                    return Err(ManifestError::invalid(
                        rec(),
                        format!("image {id} listed twice"),
                    ));
                }
                let Some(&idx) = image_index.get(id) else {
                    return Err(ManifestError::invalid(rec(), format!("unknown image {id}")));
                };
                if images[idx].identity_id.as_deref() != Some(album.dominant_identity.as_str()) {
                    return Err(ManifestError::invalid(
                        rec(),
                        format!(
                            "image {id} does not carry identity {}",
                            album.dominant_identity
                        ),
                    ));
                }
            }
            if album_index.insert(album.album_id.clone(), i).is_some() {
                return Err(ManifestError::invalid(rec(), "duplicate album_id"));
            }
        }
        let mut query_index = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            let rec = || format!("query {}", q.query_id);
            let Some(&a) = album_index.get(&q.album_id) else {
                return Err(ManifestError::invalid(
                    rec(),
                    format!("unknown album {}", q.album_id),
                ));
            };
            let album = &albums[a];
            if !album.image_ids.contains(&q.target_image_id) {
                return Err(ManifestError::invalid(
                    rec(),
                    format!(
                        "target {} not in album {}",
                        q.target_image_id, album.album_id
                    ),
                ));
            }
            if q.relevant_ids.contains(&q.target_image_id) {
                return Err(ManifestError::invalid(rec(), "target listed as relevant"));
            }
            if let Some(stray) = q
                .relevant_ids
                .iter()
                .find(|id| !album.image_ids.contains(id))
            {
                return Err(ManifestError::invalid(
                    rec(),
                    format!("relevant id {stray} not in album"),
                ));
            }
            let r = q.mask.mask_area_ratio;
            if !(r > 0.0 && r < 1.0) {
                return Err(ManifestError::invalid(
                    rec(),
                    format!("mask_area_ratio {r} outside (0,1)"),
                ));
            }
            if bucket_of(r).ok() != Some(q.mask.bucket) {
                return Err(ManifestError::invalid(
                    rec(),
                    format!("bucket {} does not match ratio {r}", q.mask.bucket),
                ));
            }
            if query_index.insert(q.query_id.clone(), i).is_some() {
                return Err(ManifestError::invalid(rec(), "duplicate query_id"));
            }
        }
        Ok(Self {
            embedding_dim,
            images,
            albums,
            queries,
            image_index,
            album_index,
            query_index,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn albums(&self) -> &[Album] {
        &self.albums
    }

    pub fn queries(&self) -> &[QueryCase] {
        &self.queries
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.image_index.get(id).map(|&i| &self.images[i])
    }

    pub fn album(&self, id: &str) -> Option<&Album> {
        self.album_index.get(id).map(|&i| &self.albums[i])
    }

    pub fn query(&self, id: &str) -> Option<&QueryCase> {
        self.query_index.get(id).map(|&i| &self.queries[i])
    }

    /// Checks each query's mask file against its target image and its
    /// recorded ratio and bucket. Paths resolve against `root`.
    pub fn validate_masks(&self, root: &Path) -> Result<(), ManifestError> {
        for q in &self.queries {
            let rec = || format!("query {}", q.query_id);
            let target = self.image(&q.target_image_id).expect("validated in new");
            let mask = Mask::load(&root.join(&q.mask.mask_ref)).map_err(|e| {
                ManifestError::invalid(rec(), format!("mask {}: {e}", q.mask.mask_ref))
            })?;
            mask.check_dims(target.width, target.height)
                .map_err(|e: MaskError| ManifestError::invalid(rec(), e.to_string()))?;
            let ratio = compute_mask_ratio(&mask)
                .map_err(|e| ManifestError::invalid(rec(), e.to_string()))?;
            if (ratio - q.mask.mask_area_ratio).abs() > RATIO_TOLERANCE {
                return Err(ManifestError::invalid(
                    rec(),
                    format!(
                        "mask ratio is {ratio}, manifest says {}",
                        q.mask.mask_area_ratio
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = ManifestFile {
            version: MANIFEST_VERSION,
            embedding_dim: self.embedding_dim,
            images: self.images.clone(),
            albums: self.albums.clone(),
            queries: self.queries.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("manifest serialises");
        s.push('\n');
        s
    }

    /// Parses and validates structure only (no mask files are read).
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ManifestError> {
        let file: ManifestFile =
            serde_json::from_str(text).map_err(|source| ManifestError::Parse {
                path: origin.to_string(),
                source,
            })?;
        if file.version != MANIFEST_VERSION {
            return Err(ManifestError::invalid(
                "version",
                format!("unsupported version {}", file.version),
            ));
        }
        Self::new(file.embedding_dim, file.images, file.albums, file.queries)
    }
}

fn validate_image(img: &ImageRecord) -> Result<(), ManifestError> {
    let rec = || format!("image {}", img.image_id);
    if img.width == 0 || img.height == 0 {
        return Err(ManifestError::invalid(
            rec(),
            "width and height must be positive",
        ));
    }
    if let Some(b) = img
        .person_boxes
        .iter()
        .find(|b| !b.fits_within(img.width, img.height))
    {
        return Err(ManifestError::invalid(
            rec(),
            format!(
                "person box {:?} exceeds {}x{}",
                <[u32; 4]>::from(*b),
                img.width,
                img.height
            ),
        ));
    }
    Ok(())
}

/// Reads, parses and fully validates a manifest, including mask files.
pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let manifest = Manifest::from_json(&text, &path.display().to_string())?;
    manifest.validate_masks(&manifest_root(path))?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), ManifestError> {
    std::fs::write(path, manifest.to_json()).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Directory that relative references in a manifest resolve against.
pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."))
}
