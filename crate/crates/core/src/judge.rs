//! Rubric scoring of reasoning instructions by a separate judge model.

use std::collections::BTreeMap;

use futures::stream::{self, StreamExt};
use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::gateway::{Gateway, ProviderKind};

pub const RUBRIC_VERSION: &str = "rubric-v1";
pub const MAX_SCORE: i64 = 20;

/// `(json field, display name, what the judge should assess)`.
pub const DIMENSIONS: [(&str, &str, &str); 4] = [
    (
        "evidence_grounding",
        "Evidence Grounding",
        "whether the predicted content is supported by cues visible around the mask rather than invented",
    ),
    (
        "structural_continuity",
        "Structural Continuity",
        "whether the predicted content is consistent with the pose, layout and boundaries that continue into the masked region",
    ),
    (
        "retrieval_discriminativeness",
        "Retrieval Discriminativeness",
        "whether the instruction gives cues specific enough to pick the correct reference photo out of the same album",
    ),
    (
        "instruction_format_quality",
        "Instruction Format Quality",
        "whether the instruction is concise, unambiguous and usable as a retrieval query",
    ),
];

const TEMPLATE: &str = "\
You are grading an instruction written by another model. It was shown a photo \
with a masked region (image {image}) and asked what likely exists in the masked \
region. The instruction will be used to retrieve a reference photo of the same \
person from their album.

Instruction:
<<<
{instruction}
>>>

Score the instruction on each dimension below with an integer from 0 to 20, \
where 0 is useless and 20 is ideal.

{dimensions}

Reply with one JSON object and nothing else. It must have exactly these \
integer fields: {fields}, plus a string field \"rationale\" with one or two \
sentences explaining the scores.
";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum JudgeError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("judge response has no usable score object: {0}")]
    Unparseable(String),
    #[error("judge model {0} is also the reasoning model")]
    SameModel(String),
    #[error("query {0} has no reasoning text to judge")]
    MissingReasoning(String),
}

/// Version tag plus a digest of the template text.
pub fn prompt_version() -> String {
    let digest = Sha256::digest(TEMPLATE.as_bytes());
    format!("{RUBRIC_VERSION}-{}", hex::encode(&digest[..6]))
}

/// The judge prompt for one instruction about the masked image `image_ref`.
pub fn build_rubric_prompt(image_ref: &str, instruction: &str) -> Result<String, JudgeError> {
    if instruction.trim().is_empty() {
        return Err(JudgeError::EmptyInstruction);
    }
    let dimensions = DIMENSIONS
        .iter()
        .map(|(field, name, what)| format!("- {name} (field \"{field}\", 0-20): {what}."))
        .collect::<Vec<_>>()
        .join("\n");
    let fields = DIMENSIONS
        .iter()
        .map(|(field, _, _)| format!("\"{field}\""))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(TEMPLATE
        .replace("{image}", image_ref)
        .replace("{dimensions}", &dimensions)
        .replace("{fields}", &fields)
        .replace("{instruction}", instruction.trim()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricScore {
    pub evidence_grounding: u8,
    pub structural_continuity: u8,
    pub retrieval_discriminativeness: u8,
    pub instruction_format_quality: u8,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub judge_model_id: String,
}

impl RubricScore {
    pub fn new(scores: [u8; 4]) -> Self {
        Self {
            evidence_grounding: scores[0],
            structural_continuity: scores[1],
            retrieval_discriminativeness: scores[2],
            instruction_format_quality: scores[3],
            rationale: String::new(),
            judge_model_id: String::new(),
        }
    }

    /// Scores in dimension order.
    pub fn scores(&self) -> [u8; 4] {
        [
            self.evidence_grounding,
            self.structural_continuity,
            self.retrieval_discriminativeness,
            self.instruction_format_quality,
        ]
    }
}

/// Finds the first JSON object in `raw` and reads the four scores from it,
/// clamping each to [0, 20]. Returns the clamp warnings alongside.
pub fn parse_scores(raw: &str) -> Result<(RubricScore, Vec<String>), JudgeError> {
    let object =
        first_object(raw).ok_or_else(|| JudgeError::Unparseable("no JSON object".into()))?;
    let mut warnings = Vec::new();
    let mut scores = [0u8; 4];
    for (slot, (field, _, _)) in scores.iter_mut().zip(DIMENSIONS) {
        let v = object
            .get(field)
            .ok_or_else(|| JudgeError::Unparseable(format!("missing field {field}")))?;
        let n = match v {
            Value::Number(n) => n.as_i64().or_else(|| {
                n.as_f64()
                    .filter(|f| f.is_finite())
                    .map(|f| f.round() as i64)
            }),
            Value::String(s) => s.trim().parse::<i64>().ok(),
            _ => None,
        }
        .ok_or_else(|| JudgeError::Unparseable(format!("{field} is not an integer: {v}")))?;
        let clamped = n.clamp(0, MAX_SCORE);
        if clamped != n {
            warnings.push(format!("{field} = {n} clamped to {clamped}"));
        }
        *slot = clamped as u8;
    }
    let mut score = RubricScore::new(scores);
    score.rationale = object
        .get("rationale")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok((score, warnings))
}

fn first_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    for (i, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

/// One instruction to score.
#[derive(Debug, Clone)]
pub struct JudgeCase {
    pub query_id: String,
    pub masked_png: Vec<u8>,
    pub instruction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedCase {
    pub query_id: String,
    pub score: Option<RubricScore>,
    /// Every judge response received, in order.
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub prompt_version: String,
    pub judge_model: String,
    pub judged: usize,
    pub excluded: usize,
    /// Mean per dimension; absent when nothing was judged.
    pub means: Option<BTreeMap<String, f64>>,
    pub cases: Vec<JudgedCase>,
}

impl JudgeReport {
    pub fn mean(&self, field: &str) -> Option<f64> {
        self.means.as_ref()?.get(field).copied()
    }
}

/// Per-dimension means over parsed scores, summed in the given order.
pub fn dimension_means(scores: &[&RubricScore]) -> Option<BTreeMap<String, f64>> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    Some(
        DIMENSIONS
            .iter()
            .enumerate()
            .map(|(d, (field, _, _))| {
                let sum: u64 = scores.iter().map(|s| u64::from(s.scores()[d])).sum();
                (field.to_string(), sum as f64 / n)
            })
            .collect(),
    )
}

async fn judge_one(case: &JudgeCase, gateway: &Gateway, model: &str) -> JudgedCase {
    let mut out = JudgedCase {
        query_id: case.query_id.clone(),
        score: None,
        responses: Vec::new(),
        warnings: Vec::new(),
        error: None,
    };
    let instruction = case.instruction.as_deref().unwrap_or_default();
    let prompt = match build_rubric_prompt(&format!("{}.png", case.query_id), instruction) {
        Ok(p) => p,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    for attempt in 0..2 {
        let raw = match gateway.judge(&case.masked_png, &prompt).await {
            Ok(raw) => raw,
            Err(e) => {
                out.error = Some(e.to_string());
                return out;
            }
        };
        out.responses.push(raw.clone());
        match parse_scores(&raw) {
            Ok((mut score, warnings)) => {
                for w in &warnings {
                    warn!("judge {}: {w}", case.query_id);
                }
                score.judge_model_id = model.to_string();
                out.warnings = warnings;
                out.score = Some(score);
                out.error = None;
                return out;
            }
            Err(e) => {
                if attempt == 0 {
                    warn!("judge {}: {e}; retrying once", case.query_id);
                }
                out.error = Some(e.to_string());
            }
        }
    }
    out
}

/// Scores every case, retrying an unparseable response once. Cases still
/// unparsed, or whose judge call failed, are excluded from the means.
pub async fn judge_batch(
    cases: &[JudgeCase],
    gateway: &Gateway,
    reasoning_model: Option<&str>,
    concurrency: usize,
) -> Result<JudgeReport, JudgeError> {
    let judge_model = gateway.model_id(ProviderKind::Judge).unwrap_or_default();
    if reasoning_model.is_some_and(|r| r == judge_model) {
        return Err(JudgeError::SameModel(judge_model));
    }
    if let Some(c) = cases
        .iter()
        .find(|c| c.instruction.as_deref().is_none_or(|t| t.trim().is_empty()))
    {
        return Err(JudgeError::MissingReasoning(c.query_id.clone()));
    }
    let judged: Vec<JudgedCase> = stream::iter(cases)
        .map(|c| judge_one(c, gateway, &judge_model))
        .buffered(concurrency.max(1))
        .collect()
        .await;
    let mut ok: Vec<(&str, &RubricScore)> = judged
        .iter()
        .filter_map(|c| c.score.as_ref().map(|s| (c.query_id.as_str(), s)))
        .collect();
    ok.sort_by(|a, b| a.0.cmp(b.0));
    let scores: Vec<&RubricScore> = ok.into_iter().map(|(_, s)| s).collect();
    Ok(JudgeReport {
        prompt_version: prompt_version(),
        judge_model,
        judged: scores.len(),
        excluded: judged.len() - scores.len(),
        means: dimension_means(&scores),
        cases: judged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_names_each_dimension_once() {
        let p = build_rubric_prompt("q.png", "A red scarf around the neck.").unwrap();
        for (_, name, _) in DIMENSIONS {
            assert_eq!(p.matches(name).count(), 1, "{name}");
        }
        assert!(p.contains("0 to 20"));
        assert!(p.contains("\"rationale\""));
        assert_eq!(
            build_rubric_prompt("q.png", "  "),
            Err(JudgeError::EmptyInstruction)
        );
    }

    #[test]
    fn parse_well_formed() {
        let raw = r#"Sure. {"evidence_grounding": 15, "structural_continuity": 14,
            "retrieval_discriminativeness": 13, "instruction_format_quality": 18, "rationale": "ok"} trailing"#;
        let (s, w) = parse_scores(raw).unwrap();
        assert_eq!(s.scores(), [15, 14, 13, 18]);
        assert_eq!(s.rationale, "ok");
        assert!(w.is_empty());
    }

    #[test]
    fn parse_clamps_with_warning() {
        let raw = r#"{"evidence_grounding": 25, "structural_continuity": -3,
            "retrieval_discriminativeness": 20, "instruction_format_quality": 0}"#;
        let (s, w) = parse_scores(raw).unwrap();
        assert_eq!(s.scores(), [20, 0, 20, 0]);
        assert_eq!(w.len(), 2);
    }

    #[test]
    fn parse_failures() {
        assert!(matches!(
            parse_scores("Looks good to me."),
            Err(JudgeError::Unparseable(_))
        ));
        assert!(matches!(
            parse_scores(r#"{"evidence_grounding": 1, "structural_continuity": 2}"#),
            Err(JudgeError::Unparseable(_))
        ));
        // A brace inside prose before the object is skipped.
        let (s, _) = parse_scores(
            r#"note {not json} {"evidence_grounding": 1, "structural_continuity": 2,
            "retrieval_discriminativeness": 3, "instruction_format_quality": 4}"#,
        )
        .unwrap();
        assert_eq!(s.scores(), [1, 2, 3, 4]);
    }

    #[test]
    fn means_of_two() {
        let a = RubricScore::new([10; 4]);
        let b = RubricScore::new([20; 4]);
        let m = dimension_means(&[&a, &b]).unwrap();
        assert!(m.values().all(|v| *v == 15.0));
        assert!(dimension_means(&[]).is_none());
    }
}
