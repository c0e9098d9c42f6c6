//! Retrieval and completion metrics, bucketed aggregation and reports.

mod completion;
mod image_metrics;
mod report;
mod retrieval;

pub use completion::{
    embedding_similarity, evaluate_completion, CompletionOptions, CompletionSample, EncoderKind,
};
pub use image_metrics::{psnr, psnr_masked, ssim, ssim_masked, to_luma, PSNR_CAP, SSIM_WINDOW};
pub use report::{
    aggregate, aggregate_completion, Arm, CompletionArm, Grouping, MetricReport, ReportRow,
    COMPLETION_COLUMNS,
};
pub use retrieval::{
    average_precision_at_k, judgments_from_runs, map_at_k, recall_at_k, recall_at_k_with,
    RecallMode, RetrievalJudgment,
};

use crate::gateway::GatewayError;
use crate::imageio::ImageIoError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no judgments to evaluate")]
    EmptyJudgments,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("query {0} has no relevant images")]
    NoRelevant(String),
    #[error("query {query_id} was ranked to depth {depth}; cannot evaluate at k={k}")]
    InsufficientDepth {
        query_id: String,
        k: usize,
        depth: usize,
    },
    #[error("images differ in size: {a:?} vs {b:?}")]
    ShapeMismatch { a: (u32, u32), b: (u32, u32) },
    #[error("image {w}x{h} is smaller than the {window}x{window} window")]
    TooSmall { w: u32, h: u32, window: u32 },
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("query {0} is not in the run journal")]
    IdMismatch(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
}
