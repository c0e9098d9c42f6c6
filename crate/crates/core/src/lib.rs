//! Album-grounded masked-query retrieval and reference-based completion.
//!
//! The crate is organised around the stages of the pipeline:
//!
//! - [`model`], [`mask`], [`embedding`]: dataset manifest, binary masks and
//!   embedding stores, with their on-disk formats.
//! - [`pipeline`]: builds an album manifest from raw detections and face
//!   observations (filtering, identity clustering, mask and query generation).
//! - [`index`]: exact cosine top-k over one album.
//! - [`gateway`]: clients for the external neural services and a
//!   deterministic mock world.
//! - [`compose`]: visible-region extraction and composed query embeddings.
//! - [`engine`]: per-query orchestration, batch runs and run journals.
//! - [`eval`]: retrieval and completion metrics with table-shaped reports.
//! - [`judge`]: rubric scoring of reasoning text by an independent VLM.

pub mod compose;
pub mod embedding;
pub mod engine;
pub mod eval;
pub mod gateway;
pub mod imageio;
pub mod index;
pub mod judge;
pub mod mask;
pub mod model;
pub mod pipeline;
pub mod seed;

pub use embedding::{EmbeddingSource, EmbeddingStore, EmbeddingVector};
pub use mask::{bucket_of, compute_mask_ratio, Bucket, Mask};
pub use model::{
    load_manifest, save_manifest, Album, ImageRecord, Manifest, MaskSpec, PixelBox, QueryCase,
};
