use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::completion::CompletionSample;
use super::retrieval::{
    judgments_from_runs, map_at_k, recall_at_k_with, RecallMode, RetrievalJudgment,
};
use super::EvalError;
use crate::engine::PipelineRun;
use crate::mask::Bucket;

pub const COMPLETION_COLUMNS: [&str; 6] = ["CLIP", "DINO", "DreamSim", "LPIPS", "PSNR", "SSIM"];
const ALL: &str = "all";
const UNBUCKETED: &str = "unbucketed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One row pooling every arm.
    #[default]
    Overall,
    ByBucket,
    ByArm,
}

/// The runs of one method variant plus their judgments.
#[derive(Debug, Clone)]
pub struct Arm {
    pub name: String,
    pub runs: Vec<PipelineRun>,
    pub judgments: Vec<RetrievalJudgment>,
}

impl Arm {
    pub fn from_runs(name: impl Into<String>, runs: Vec<PipelineRun>) -> Self {
        let judgments = judgments_from_runs(&runs);
        Self {
            name: name.into(),
            runs,
            judgments,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompletionArm {
    pub name: String,
    pub samples: Vec<CompletionSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: String,
    pub bucket: String,
    pub count: usize,
    /// One entry per report column; `None` renders as a dash.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kind: String,
    pub grouping: Grouping,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub total: usize,
    #[serde(default)]
    pub fingerprint: Option<String>,
}

fn bucket_label(b: Option<Bucket>) -> String {
    b.map_or_else(|| UNBUCKETED.to_string(), |b| b.as_str().to_string())
}

fn bucket_rank(label: &str) -> usize {
    Bucket::ALL
        .iter()
        .position(|b| b.as_str() == label)
        .unwrap_or(Bucket::ALL.len())
}

/// Groups keyed by `(arm, bucket)` in report order: bucket-major for
/// by-bucket reports, so arms pair off within each bucket.
fn group_order(keys: &mut Vec<(String, String)>, arm_order: &[String], grouping: Grouping) {
    let arm_pos = |a: &str| arm_order.iter().position(|x| x == a).unwrap_or(usize::MAX);
    keys.sort_by(|a, b| match grouping {
        Grouping::ByBucket => bucket_rank(&a.1)
            .cmp(&bucket_rank(&b.1))
            .then_with(|| arm_pos(&a.0).cmp(&arm_pos(&b.0))),
        _ => arm_pos(&a.0).cmp(&arm_pos(&b.0)),
    });
    keys.dedup();
}

fn key(grouping: Grouping, arm: &str, bucket: Option<Bucket>) -> (String, String) {
    match grouping {
        Grouping::Overall => (ALL.to_string(), ALL.to_string()),
        Grouping::ByArm => (arm.to_string(), ALL.to_string()),
        Grouping::ByBucket => (arm.to_string(), bucket_label(bucket)),
    }
}

/// Recall@k and mAP@k for every k, per group. Groups without judged
/// queries are absent.
pub fn aggregate(
    arms: &[Arm],
    ks: &[usize],
    grouping: Grouping,
    mode: RecallMode,
) -> Result<MetricReport, EvalError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::InvalidK);
    }
    let mut groups: BTreeMap<(String, String), Vec<&RetrievalJudgment>> = BTreeMap::new();
    let mut total = 0;
    for arm in arms {
        let buckets: BTreeMap<&str, Option<Bucket>> = arm
            .runs
            .iter()
            .map(|r| (r.query_id.as_str(), r.bucket))
            .collect();
        for j in &arm.judgments {
            let bucket = *buckets
                .get(j.query_id.as_str())
                .ok_or_else(|| EvalError::IdMismatch(j.query_id.clone()))?;
            groups
                .entry(key(grouping, &arm.name, bucket))
                .or_default()
                .push(j);
            total += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::EmptyJudgments);
    }
    let arm_order: Vec<String> = std::iter::once(ALL.to_string())
        .chain(arms.iter().map(|a| a.name.clone()))
        .collect();
    let mut keys: Vec<_> = groups.keys().cloned().collect();
    group_order(&mut keys, &arm_order, grouping);

    let mut columns = Vec::new();
    for k in ks {
        columns.push(format!("Recall@{k}"));
    }
    for k in ks {
        columns.push(format!("mAP@{k}"));
    }
    let mut rows = Vec::new();
    for key in keys {
        let mut js: Vec<RetrievalJudgment> = groups[&key].iter().map(|j| (*j).clone()).collect();
        js.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        let mut values = Vec::new();
        for &k in ks {
            values.push(Some(recall_at_k_with(&js, k, mode)?));
        }
        for &k in ks {
            values.push(Some(map_at_k(&js, k)?));
        }
        rows.push(ReportRow {
            arm: key.0,
            bucket: key.1,
            count: js.len(),
            values,
        });
    }
    Ok(MetricReport {
        kind: "retrieval".into(),
        grouping,
        columns,
        rows,
        total,
        fingerprint: None,
    })
}

/// Per-column means of completion metrics, per group.
pub fn aggregate_completion(
    arms: &[CompletionArm],
    grouping: Grouping,
) -> Result<MetricReport, EvalError> {
    let mut groups: BTreeMap<(String, String), Vec<&CompletionSample>> = BTreeMap::new();
    let mut total = 0;
    for arm in arms {
        let mut seen = HashSet::new();
        for s in &arm.samples {
            if !seen.insert(&s.query_id) {
                return Err(EvalError::IdMismatch(s.query_id.clone()));
            }
            groups
                .entry(key(grouping, &arm.name, s.bucket))
                .or_default()
                .push(s);
            total += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::EmptyJudgments);
    }
    let arm_order: Vec<String> = std::iter::once(ALL.to_string())
        .chain(arms.iter().map(|a| a.name.clone()))
        .collect();
    let mut keys: Vec<_> = groups.keys().cloned().collect();
    group_order(&mut keys, &arm_order, grouping);
    let mut rows = Vec::new();
    for key in keys {
        let mut samples = groups[&key].clone();
        samples.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        let values = COMPLETION_COLUMNS
            .iter()
            .map(|col| {
                let vs: Vec<f64> = samples
                    .iter()
                    .filter_map(|s| s.values.get(*col).copied())
                    .collect();
                (!vs.is_empty()).then(|| vs.iter().sum::<f64>() / vs.len() as f64)
            })
            .collect();
        rows.push(ReportRow {
            arm: key.0,
            bucket: key.1,
            count: samples.len(),
            values,
        });
    }
    Ok(MetricReport {
        kind: "completion".into(),
        grouping,
        columns: COMPLETION_COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows,
        total,
        fingerprint: None,
    })
}

impl MetricReport {
    /// Records a digest of the configuration that produced the report.
    pub fn with_fingerprint(mut self, config: &str) -> Self {
        self.fingerprint = Some(hex::encode(&Sha256::digest(config.as_bytes())[..8]));
        self
    }

    pub fn row(&self, arm: &str, bucket: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.arm == arm && r.bucket == bucket)
    }

    pub fn value(&self, arm: &str, bucket: &str, column: &str) -> Option<f64> {
        let i = self.columns.iter().position(|c| c == column)?;
        self.row(arm, bucket)?.values[i]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// Markdown table with two-decimal values.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "## {} ({})",
            self.kind,
            serde_json::to_value(self.grouping)
                .unwrap()
                .as_str()
                .unwrap()
        );
        out.push('\n');
        let mut header = vec![
            "Method".to_string(),
            "Mask ratio".to_string(),
            "N".to_string(),
        ];
        header.extend(self.columns.iter().cloned());
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
        for row in &self.rows {
            let mut cells = vec![
                row.arm.clone(),
                bucket_display(&row.bucket),
                row.count.to_string(),
            ];
            cells.extend(row.values.iter().map(|v| match v {
                Some(v) => format!("{v:.2}"),
                None => "\u{2014}".to_string(),
            }));
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        if let Some(fp) = &self.fingerprint {
            let _ = writeln!(out, "\nconfig {fp}");
        }
        out
    }
}

fn bucket_display(label: &str) -> String {
    Bucket::ALL
        .iter()
        .find(|b| b.as_str() == label)
        .map_or_else(|| label.to_string(), |b| b.label().to_string())
}
