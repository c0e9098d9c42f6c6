use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::engine::PipelineRun;

/// A ranked list and its ground-truth relevant set for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalJudgment {
    pub query_id: String,
    pub ranked: Vec<String>,
    pub relevant: Vec<String>,
    /// Set when `ranked` was cut off at this length, so deeper k values
    /// cannot be scored.
    #[serde(default)]
    pub depth_limit: Option<usize>,
}

impl RetrievalJudgment {
    pub fn new(query_id: impl Into<String>, ranked: Vec<String>, relevant: Vec<String>) -> Self {
        Self {
            query_id: query_id.into(),
            ranked,
            relevant,
            depth_limit: None,
        }
    }

    fn check(&self, k: usize) -> Result<HashSet<&str>, EvalError> {
        if self.relevant.is_empty() {
            return Err(EvalError::NoRelevant(self.query_id.clone()));
        }
        if let Some(depth) = self.depth_limit {
            if k > depth {
                return Err(EvalError::InsufficientDepth {
                    query_id: self.query_id.clone(),
                    k,
                    depth,
                });
            }
        }
        Ok(self.relevant.iter().map(String::as_str).collect())
    }
}

/// Judgments for every judgeable run that reached retrieval. A run whose
/// candidate list is as long as its k may have been truncated.
pub fn judgments_from_runs(runs: &[PipelineRun]) -> Vec<RetrievalJudgment> {
    runs.iter()
        .filter(|r| r.has_candidates() && !r.relevant_ids.is_empty())
        .map(|r| RetrievalJudgment {
            query_id: r.query_id.clone(),
            ranked: r.candidates.iter().map(|c| c.image_id.clone()).collect(),
            relevant: r.relevant_ids.clone(),
            depth_limit: (r.candidates.len() >= r.k).then_some(r.k),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// A query scores 1 if any relevant image is in the top k.
    #[default]
    HitRate,
    /// A query scores the fraction of its relevant images in the top k.
    Coverage,
}

pub fn recall_at_k(judgments: &[RetrievalJudgment], k: usize) -> Result<f64, EvalError> {
    recall_at_k_with(judgments, k, RecallMode::HitRate)
}

pub fn recall_at_k_with(
    judgments: &[RetrievalJudgment],
    k: usize,
    mode: RecallMode,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if judgments.is_empty() {
        return Err(EvalError::EmptyJudgments);
    }
    let mut total = 0.0;
    for j in judgments {
        let relevant = j.check(k)?;
        let hits = j
            .ranked
            .iter()
            .take(k)
            .filter(|id| relevant.contains(id.as_str()))
            .count();
        total += match mode {
            RecallMode::HitRate => f64::from(u8::from(hits > 0)),
            RecallMode::Coverage => hits as f64 / relevant.len() as f64,
        };
    }
    Ok(100.0 * total / judgments.len() as f64)
}

/// AP@k in [0, 1], normalised by `min(k, |relevant|)`.
pub fn average_precision_at_k(ranked: &[String], relevant: &HashSet<&str>, k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if relevant.contains(id.as_str()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    let norm = k.min(relevant.len());
    if norm == 0 {
        0.0
    } else {
        sum / norm as f64
    }
}

pub fn map_at_k(judgments: &[RetrievalJudgment], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if judgments.is_empty() {
        return Err(EvalError::EmptyJudgments);
    }
    let mut total = 0.0;
    for j in judgments {
        let relevant = j.check(k)?;
        total += average_precision_at_k(&j.ranked, &relevant, k);
    }
    Ok(100.0 * total / judgments.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn j(q: &str, ranked: &[&str], rel: &[&str]) -> RetrievalJudgment {
        RetrievalJudgment::new(
            q,
            ranked.iter().map(|s| s.to_string()).collect(),
            rel.iter().map(|s| s.to_string()).collect(),
        )
    }

    #[test]
    fn recall_hits_at_rank_one_three_and_none() {
        let js = [
            j("a", &["r", "x", "y"], &["r"]),
            j("b", &["x", "y", "r"], &["r"]),
            j("c", &["x", "y", "z"], &["r"]),
        ];
        assert!((recall_at_k(&js, 2).unwrap() - 100.0 / 3.0).abs() < 1e-9);
        assert!((recall_at_k(&js, 3).unwrap() - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn ap_example() {
        let js = [j("a", &["r1", "n", "r2"], &["r1", "r2"])];
        let v = map_at_k(&js, 3).unwrap();
        assert!((v - 50.0 * (1.0 + 2.0 / 3.0)).abs() < 1e-9);
        assert!((v - 83.33).abs() < 0.01);
    }

    #[test]
    fn map_bounds() {
        assert_eq!(
            map_at_k(&[j("a", &["r1", "r2"], &["r1", "r2", "r3"])], 2).unwrap(),
            100.0
        );
        assert_eq!(map_at_k(&[j("a", &["n", "m"], &["r"])], 2).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            recall_at_k(&[], 1),
            Err(EvalError::EmptyJudgments)
        ));
        assert!(matches!(
            map_at_k(&[j("a", &["x"], &["x"])], 0),
            Err(EvalError::InvalidK)
        ));
        assert!(matches!(
            recall_at_k(&[j("a", &["x"], &[])], 1),
            Err(EvalError::NoRelevant(_))
        ));
        let mut cut = j("a", &["x"], &["x"]);
        cut.depth_limit = Some(1);
        assert!(matches!(
            recall_at_k(&[cut], 5),
            Err(EvalError::InsufficientDepth { .. })
        ));
    }

    #[test]
    fn coverage_mode() {
        let js = [j("a", &["r1", "x"], &["r1", "r2"])];
        assert_eq!(
            recall_at_k_with(&js, 2, RecallMode::Coverage).unwrap(),
            50.0
        );
        assert_eq!(recall_at_k(&js, 2).unwrap(), 100.0);
    }
}
