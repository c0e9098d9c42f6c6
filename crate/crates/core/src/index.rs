//! Exact cosine ranking over the images of one album.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSource, EmbeddingVector, UNIT_NORM_TOLERANCE};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector for {id} has norm {norm}, expected unit norm")]
    NotUnitNorm { id: String, norm: f64 },
    #[error("vector for {id} has source {kind:?}, expected image")]
    WrongSource { id: String, kind: EmbeddingSource },
    #[error("duplicate image id {0}")]
    DuplicateId(String),
    #[error("k must be at least 1")]
    InvalidK,
}

/// Cosine similarity of two unit vectors, clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    let dot = a.dot(b).map_err(|_| IndexError::DimensionMismatch {
        expected: a.dim(),
        got: b.dim(),
    })?;
    Ok(dot.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub image_id: String,
    pub score: f64,
}

/// Ranking order: score descending, then image id ascending.
pub fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub query_id: String,
    pub items: Vec<Candidate>,
}

impl RankedCandidates {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|c| c.image_id.as_str())
    }

    pub fn first(&self) -> Option<&Candidate> {
        self.items.first()
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.items.iter().any(|c| c.image_id == image_id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct AlbumIndex {
    album_id: String,
    dim: usize,
    entries: Vec<(String, EmbeddingVector)>,
}

impl AlbumIndex {
    /// Builds an index. Vectors must be unit-norm image embeddings of one
    /// dimension; nothing is normalised here.
    pub fn build(
        album_id: impl Into<String>,
        dim: usize,
        entries: impl IntoIterator<Item = (String, EmbeddingVector)>,
    ) -> Result<Self, IndexError> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (id, v) in entries {
            if v.dim() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    got: v.dim(),
                });
            }
            if v.source() != EmbeddingSource::Image {
                return Err(IndexError::WrongSource {
                    id,
                    kind: v.source(),
                });
            }
            let norm = v.norm();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(IndexError::NotUnitNorm { id, norm });
            }
            if !seen.insert(id.clone()) {
                return Err(IndexError::DuplicateId(id));
            }
            out.push((id, v));
        }
        Ok(Self {
            album_id: album_id.into(),
            dim,
            entries: out,
        })
    }

    pub fn album_id(&self) -> &str {
        &self.album_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.entries.iter().find(|(e, _)| e == id).map(|(_, v)| v)
    }

    /// The `k` best entries not in `exclude`, in rank order.
    pub fn top_k(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude: &HashSet<String>,
    ) -> Result<RankedCandidates, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let mut scored = Vec::with_capacity(self.entries.len());
        for (id, v) in &self.entries {
            if exclude.contains(id) {
                continue;
            }
            scored.push(Candidate {
                image_id: id.clone(),
                score: cosine(query, v)?,
            });
        }
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(RankedCandidates {
            query_id: String::new(),
            items: scored,
        })
    }
}
