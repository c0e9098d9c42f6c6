//! Per-query orchestration: reason, compose, retrieve, select, complete.
//!
//! Every stage emits a journal record. A batch writes
//! `runs/<run_id>/journal.jsonl`, `runs/<run_id>/outputs/<query_id>.png`
//! and `runs/<run_id>/config.json`, and can be resumed after interruption.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use image::RgbImage;
use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::compose::{self, ComposeError, CompositionPolicy};
use crate::embedding::EmbeddingStore;
use crate::gateway::{Gateway, GatewayError, ProviderKind, DEFAULT_INSTRUCTION};
use crate::imageio::{self, ImageIoError};
use crate::index::{AlbumIndex, Candidate, IndexError, RankedCandidates};
use crate::mask::{bucket_of, compute_mask_ratio, Bucket, Mask, MaskError};
use crate::model::{Manifest, QueryCase};
use crate::pipeline::file_safe;
use crate::seed::rng_from;

pub const DEFAULT_K: usize = 5;
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const OUTPUT_DIR: &str = "outputs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Reason,
    Compose,
    Retrieve,
    Select,
    Complete,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Reason => "reason",
            Stage::Compose => "compose",
            Stage::Retrieve => "retrieve",
            Stage::Select => "select",
            Stage::Complete => "complete",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("{stage} stage: {source}")]
    Provider {
        stage: Stage,
        #[source]
        source: GatewayError,
    },
    #[error("compose: {0}")]
    Compose(ComposeError),
    #[error("manual choice {0} is not among the retrieved candidates")]
    InvalidManualChoice(String),
    #[error("manual selection needs a chosen image id")]
    ManualChoiceRequired,
    #[error("a manual choice was given but selection mode is {0}")]
    UnexpectedManualChoice(String),
    #[error("wrong-reference sampling needs at least two albums")]
    SingleAlbum,
    #[error("no candidates to select from")]
    NoCandidates,
    #[error("unknown album {0}")]
    UnknownAlbum(String),
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("image {image} is not in album {album}")]
    NotInAlbum { image: String, album: String },
    #[error("no embedding for image {0}")]
    MissingEmbedding(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("journal {path}: {message}")]
    Journal { path: String, message: String },
    #[error("run {run_id} was started with a different configuration")]
    ConfigMismatch { run_id: String },
    #[error("{stage} stage did not finish before the request deadline")]
    Deadline { stage: Stage },
}

impl EngineError {
    /// True when the failure came from an external service.
    pub fn is_provider(&self) -> bool {
        matches!(self, EngineError::Provider { .. })
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            EngineError::Provider { stage, .. } | EngineError::Deadline { stage } => Some(*stage),
            _ => None,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            EngineError::Provider { source, .. } => source.code(),
            EngineError::Compose(_) => "compose",
            EngineError::InvalidManualChoice(_) => "invalid_manual_choice",
            EngineError::ManualChoiceRequired | EngineError::UnexpectedManualChoice(_) => {
                "selection"
            }
            EngineError::SingleAlbum => "single_album",
            EngineError::NoCandidates => "no_candidates",
            EngineError::UnknownAlbum(_)
            | EngineError::UnknownImage(_)
            | EngineError::NotInAlbum { .. } => "not_found",
            EngineError::MissingEmbedding(_) => "missing_embedding",
            EngineError::InvalidInput(_) => "invalid_input",
            EngineError::Index(_) => "index",
            EngineError::Mask(_) => "mask_shape",
            EngineError::Image(_) => "image",
            EngineError::Io { .. } => "io",
            EngineError::Journal { .. } => "journal",
            EngineError::ConfigMismatch { .. } => "config_mismatch",
            EngineError::Deadline { .. } => "timeout",
        }
    }

    fn at(stage: Stage) -> impl FnOnce(GatewayError) -> EngineError {
        move |source| EngineError::Provider { stage, source }
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
        move |source| EngineError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<ComposeError> for EngineError {
    fn from(e: ComposeError) -> Self {
        match e {
            ComposeError::Gateway(source) => EngineError::Provider {
                stage: Stage::Compose,
                source,
            },
            other => EngineError::Compose(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    AutoTop1,
    Manual,
    WrongReference,
}

impl SelectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::AutoTop1 => "auto_top1",
            SelectionMode::Manual => "manual",
            SelectionMode::WrongReference => "wrong_reference",
        }
    }
}

impl std::str::FromStr for SelectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto_top1" | "auto" => Ok(SelectionMode::AutoTop1),
            "manual" => Ok(SelectionMode::Manual),
            "wrong_reference" => Ok(SelectionMode::WrongReference),
            other => Err(format!("unknown selection mode {other:?}")),
        }
    }
}

/// Per-query knobs shared by every case of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub k: usize,
    pub policy: CompositionPolicy,
    pub selection: SelectionMode,
    pub seed: u64,
    pub instruction: String,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            policy: CompositionPolicy::default(),
            selection: SelectionMode::AutoTop1,
            seed: 0,
            instruction: DEFAULT_INSTRUCTION.to_string(),
        }
    }
}

/// A query with its mask raster in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryInput {
    pub query_id: String,
    pub album_id: String,
    pub target_image_id: String,
    pub mask: Mask,
    pub mask_ratio: f64,
    pub bucket: Option<Bucket>,
    pub relevant_ids: Vec<String>,
    pub reasoning_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// Retrieval succeeded; candidates and reasoning remain usable.
    CompletionFailed {
        code: String,
        error: String,
    },
    Failed {
        stage: Stage,
        code: String,
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub query_id: String,
    pub album_id: String,
    pub target_image_id: String,
    pub mask_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket: Option<Bucket>,
    pub relevant_ids: Vec<String>,
    pub policy: CompositionPolicy,
    pub k: usize,
    pub reasoning_text: Option<String>,
    pub candidates: Vec<Candidate>,
    pub chosen_reference: Option<String>,
    pub selection_mode: SelectionMode,
    pub output_image_ref: Option<String>,
    pub timings_ms: BTreeMap<String, u64>,
    pub status: RunStatus,
}

impl PipelineRun {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    /// Retrieval finished, whether or not completion did.
    pub fn has_candidates(&self) -> bool {
        !matches!(self.status, RunStatus::Failed { .. })
    }

    pub fn ranked(&self) -> RankedCandidates {
        RankedCandidates {
            query_id: self.query_id.clone(),
            items: self.candidates.clone(),
        }
    }
}

/// One line of a run journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub query_id: String,
    pub stage: String,
    pub data: Value,
}

pub const RESULT_STAGE: &str = "result";

impl JournalRecord {
    fn stage(query_id: &str, stage: Stage, data: Value) -> Self {
        Self {
            query_id: query_id.to_string(),
            stage: stage.as_str().to_string(),
            data,
        }
    }

    pub fn result(run: &PipelineRun) -> Self {
        Self {
            query_id: run.query_id.clone(),
            stage: RESULT_STAGE.to_string(),
            data: serde_json::to_value(run).expect("run serialises"),
        }
    }

    pub fn as_run(&self) -> Option<PipelineRun> {
        (self.stage == RESULT_STAGE)
            .then(|| serde_json::from_value(self.data.clone()).ok())
            .flatten()
    }
}

/// Stage records and timings accumulated while a query runs.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    pub records: Vec<JournalRecord>,
    pub timings_ms: BTreeMap<String, u64>,
}

impl Trace {
    /// The first stage with no record yet, for attributing an interrupted
    /// query. `policy` decides whether reasoning was expected.
    pub fn pending_stage(&self, policy: CompositionPolicy) -> Stage {
        let done = |s: Stage| self.records.iter().any(|r| r.stage == s.as_str());
        [
            Stage::Reason,
            Stage::Compose,
            Stage::Retrieve,
            Stage::Select,
            Stage::Complete,
        ]
        .into_iter()
        .filter(|s| *s != Stage::Reason || policy.needs_reasoning())
        .find(|s| !done(*s))
        .unwrap_or(Stage::Complete)
    }
}

/// State after retrieval, before a reference is chosen.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub input: QueryInput,
    pub options: RunOptions,
    pub visible_png: Vec<u8>,
    pub reasoning_text: Option<String>,
    pub candidates: RankedCandidates,
}

/// Result of a full query: the run, its output image if any, and its
/// journal records (ending with the result record).
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub run: PipelineRun,
    pub output: Option<RgbImage>,
    pub records: Vec<JournalRecord>,
}

/// Uniform draw over images outside the query's album, deterministic in
/// `(query_id, seed)`.
pub fn wrong_reference_sample(
    query_id: &str,
    album_id: &str,
    manifest: &Manifest,
    seed: u64,
) -> Result<String, EngineError> {
    if manifest.albums().len() < 2 {
        return Err(EngineError::SingleAlbum);
    }
    let foreign: Vec<&str> = manifest
        .albums()
        .iter()
        .filter(|a| a.album_id != album_id)
        .flat_map(|a| a.image_ids.iter().map(String::as_str))
        .collect();
    if foreign.is_empty() {
        return Err(EngineError::SingleAlbum);
    }
    let mut rng = rng_from(&[b"wrong-reference", query_id.as_bytes(), &seed.to_le_bytes()]);
    Ok(foreign[rng.random_range(0..foreign.len())].to_string())
}

/// Applies a selection rule to retrieved candidates.
pub fn select_reference(
    candidates: &RankedCandidates,
    mode: SelectionMode,
    manual_choice: Option<&str>,
    wrong: impl FnOnce() -> Result<String, EngineError>,
) -> Result<String, EngineError> {
    match (mode, manual_choice) {
        (SelectionMode::Manual, None) => Err(EngineError::ManualChoiceRequired),
        (SelectionMode::Manual, Some(choice)) => {
            if candidates.contains(choice) {
                Ok(choice.to_string())
            } else {
                Err(EngineError::InvalidManualChoice(choice.to_string()))
            }
        }
        (other, Some(_)) => Err(EngineError::UnexpectedManualChoice(
            other.as_str().to_string(),
        )),
        (SelectionMode::AutoTop1, None) => candidates
            .first()
            .map(|c| c.image_id.clone())
            .ok_or(EngineError::NoCandidates),
        (SelectionMode::WrongReference, None) => wrong(),
    }
}

/// Frozen configuration of a batch run, stored as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub run_id: String,
    pub options: RunOptions,
    #[serde(default = "default_concurrency", skip_serializing)]
    pub concurrency: usize,
    #[serde(default)]
    pub manifest: Option<String>,
    #[serde(default)]
    pub models: BTreeMap<String, String>,
}

fn default_concurrency() -> usize {
    4
}

impl BatchConfig {
    pub fn new(run_id: impl Into<String>, options: RunOptions) -> Self {
        Self {
            run_id: run_id.into(),
            options,
            concurrency: default_concurrency(),
            manifest: None,
            models: BTreeMap::new(),
        }
    }

    pub fn with_concurrency(mut self, concurrency: usize) -> Self {
        self.concurrency = concurrency.max(1);
        self
    }
}

pub fn run_dir(runs_root: &Path, run_id: &str) -> PathBuf {
    runs_root.join(run_id)
}

/// Reads a journal. Missing files read as empty.
pub fn read_journal(path: &Path) -> Result<Vec<JournalRecord>, EngineError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(EngineError::io(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            // A torn final line from an interrupted write is dropped.
            Err(_) if i + 1 == text.lines().count() && !text.ends_with('\n') => {
                warn!("{}: ignoring incomplete last line", path.display())
            }
            Err(e) => {
                return Err(EngineError::Journal {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(out)
}

/// Completed runs in a journal, in journal order.
pub fn load_runs(run_dir: &Path) -> Result<Vec<PipelineRun>, EngineError> {
    Ok(read_journal(&run_dir.join(JOURNAL_FILE))?
        .iter()
        .filter_map(JournalRecord::as_run)
        .collect())
}

fn encode_records(records: &[JournalRecord]) -> String {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serialises"));
        buf.push('\n');
    }
    buf
}

/// Appends records with a single write.
pub fn append_journal(path: &Path, records: &[JournalRecord]) -> Result<(), EngineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(EngineError::io(dir))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(EngineError::io(path))?;
    f.write_all(encode_records(records).as_bytes())
        .map_err(EngineError::io(path))
}

pub struct Engine {
    manifest: Arc<Manifest>,
    root: PathBuf,
    indexes: HashMap<String, AlbumIndex>,
    gateway: Arc<Gateway>,
}

impl Engine {
    /// Builds one index per album from `store`, which must hold an image
    /// embedding for every album image.
    pub fn new(
        manifest: Arc<Manifest>,
        root: impl Into<PathBuf>,
        store: &EmbeddingStore,
        gateway: Arc<Gateway>,
    ) -> Result<Self, EngineError> {
        let built: Result<Vec<AlbumIndex>, EngineError> = manifest
            .albums()
            .par_iter()
            .map(|album| {
                let mut entries = Vec::with_capacity(album.image_ids.len());
                for id in &album.image_ids {
                    let v = store
                        .get(id)
                        .ok_or_else(|| EngineError::MissingEmbedding(id.clone()))?;
                    entries.push((id.clone(), v.clone()));
                }
                Ok(AlbumIndex::build(
                    album.album_id.clone(),
                    manifest.embedding_dim(),
                    entries,
                )?)
            })
            .collect();
        let indexes = built?
            .into_iter()
            .map(|ix| (ix.album_id().to_string(), ix))
            .collect();
        Ok(Self {
            manifest,
            root: root.into(),
            indexes,
            gateway,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn index(&self, album_id: &str) -> Option<&AlbumIndex> {
        self.indexes.get(album_id)
    }

    pub fn image_path(&self, image_id: &str) -> Result<PathBuf, EngineError> {
        let record = self
            .manifest
            .image(image_id)
            .ok_or_else(|| EngineError::UnknownImage(image_id.to_string()))?;
        Ok(self.root.join(&record.file_ref))
    }

    pub fn image_bytes(&self, image_id: &str) -> Result<Vec<u8>, EngineError> {
        Ok(imageio::read_file(&self.image_path(image_id)?)?)
    }

    pub fn load_image(&self, image_id: &str) -> Result<RgbImage, EngineError> {
        Ok(imageio::decode_rgb(&self.image_bytes(image_id)?)?)
    }

    /// Loads the mask of a manifest query case.
    pub fn resolve_case(&self, case: &QueryCase) -> Result<QueryInput, EngineError> {
        let mask = Mask::load(&self.root.join(&case.mask.mask_ref))?;
        Ok(QueryInput {
            query_id: case.query_id.clone(),
            album_id: case.album_id.clone(),
            target_image_id: case.target_image_id.clone(),
            mask_ratio: case.mask.mask_area_ratio,
            bucket: Some(case.mask.bucket),
            relevant_ids: case.relevant_ids.clone(),
            reasoning_text: case.reasoning_text.clone(),
            mask,
        })
    }

    /// A query for an arbitrary mask on an album image.
    pub fn adhoc_input(
        &self,
        query_id: impl Into<String>,
        album_id: &str,
        target_image_id: &str,
        mask: Mask,
    ) -> Result<QueryInput, EngineError> {
        let album = self
            .manifest
            .album(album_id)
            .ok_or_else(|| EngineError::UnknownAlbum(album_id.to_string()))?;
        if !album.image_ids.iter().any(|i| i == target_image_id) {
            return Err(EngineError::NotInAlbum {
                image: target_image_id.to_string(),
                album: album_id.to_string(),
            });
        }
        let record = self
            .manifest
            .image(target_image_id)
            .expect("album images are in the manifest");
        mask.check_dims(record.width, record.height)?;
        let ratio = compute_mask_ratio(&mask)?;
        Ok(QueryInput {
            query_id: query_id.into(),
            album_id: album_id.to_string(),
            target_image_id: target_image_id.to_string(),
            bucket: bucket_of(ratio).ok(),
            mask_ratio: ratio,
            relevant_ids: Vec::new(),
            reasoning_text: None,
            mask,
        })
    }

    fn time<T>(&self, trace: &mut Trace, stage: Stage, start: u64, value: T) -> T {
        let now = self.gateway.clock().elapsed_ms();
        trace
            .timings_ms
            .insert(stage.as_str().to_string(), now.saturating_sub(start));
        value
    }

    /// Reasoning, composition and top-k retrieval.
    pub async fn retrieve(
        &self,
        input: QueryInput,
        options: &RunOptions,
        trace: &mut Trace,
    ) -> Result<Retrieval, EngineError> {
        let qid = input.query_id.clone();
        let index = self
            .indexes
            .get(&input.album_id)
            .ok_or_else(|| EngineError::UnknownAlbum(input.album_id.clone()))?;
        let target = self.load_image(&input.target_image_id)?;
        let visible = compose::visible_region(&target, &input.mask)?;
        let visible_png = imageio::encode_rgb_png(&visible)?;

        let reasoning_text = if !options.policy.needs_reasoning() {
            None
        } else if let Some(text) = input
            .reasoning_text
            .clone()
            .filter(|t| !t.trim().is_empty())
        {
            trace.records.push(JournalRecord::stage(
                &qid,
                Stage::Reason,
                json!({"source": "manifest", "text": text}),
            ));
            Some(text)
        } else {
            let start = self.gateway.clock().elapsed_ms();
            let text = self
                .gateway
                .reason(&visible_png, &input.mask, &options.instruction)
                .await
                .map_err(EngineError::at(Stage::Reason));
            let text = self.time(trace, Stage::Reason, start, text)?;
            trace.records.push(JournalRecord::stage(
                &qid,
                Stage::Reason,
                json!({
                    "source": "provider",
                    "model": self.gateway.model_id(ProviderKind::Reasoning),
                    "instruction": options.instruction,
                    "text": text,
                }),
            ));
            Some(text)
        };

        let start = self.gateway.clock().elapsed_ms();
        let query = compose::compose(
            &visible_png,
            reasoning_text.as_deref(),
            options.policy,
            &self.gateway,
        )
        .await;
        let query = self.time(trace, Stage::Compose, start, query)?;
        trace.records.push(JournalRecord::stage(
            &qid,
            Stage::Compose,
            json!({"policy": options.policy, "dim": query.dim()}),
        ));

        let start = self.gateway.clock().elapsed_ms();
        let exclude: HashSet<String> = [input.target_image_id.clone()].into();
        let mut candidates = index.top_k(&query, options.k, &exclude)?;
        candidates.query_id = qid.clone();
        self.time(trace, Stage::Retrieve, start, ());
        trace.records.push(JournalRecord::stage(
            &qid,
            Stage::Retrieve,
            json!({"k": options.k, "candidates": candidates.items}),
        ));
        Ok(Retrieval {
            input,
            options: options.clone(),
            visible_png,
            reasoning_text,
            candidates,
        })
    }

    /// Chooses the reference for a retrieval.
    pub fn select(
        &self,
        retrieval: &Retrieval,
        manual_choice: Option<&str>,
    ) -> Result<String, EngineError> {
        let input = &retrieval.input;
        select_reference(
            &retrieval.candidates,
            retrieval.options.selection,
            manual_choice,
            || {
                wrong_reference_sample(
                    &input.query_id,
                    &input.album_id,
                    &self.manifest,
                    retrieval.options.seed,
                )
            },
        )
    }

    /// Selection and completion. Errors end up in the run status alongside
    /// everything retrieval produced; a selection error is also returned.
    pub async fn finish(
        &self,
        retrieval: Retrieval,
        manual_choice: Option<&str>,
        mut trace: Trace,
    ) -> (QueryOutcome, Option<EngineError>) {
        let qid = retrieval.input.query_id.clone();
        let mut run = self.base_run(&retrieval.input, &retrieval.options);
        run.reasoning_text = retrieval.reasoning_text.clone();
        run.candidates = retrieval.candidates.items.clone();

        let chosen = match self.select(&retrieval, manual_choice) {
            Ok(id) => id,
            Err(e) => return (self.failed(run, Stage::Select, &e, trace), Some(e)),
        };
        trace.records.push(JournalRecord::stage(
            &qid,
            Stage::Select,
            json!({"mode": retrieval.options.selection, "chosen": chosen}),
        ));
        run.chosen_reference = Some(chosen.clone());

        let start = self.gateway.clock().elapsed_ms();
        let completed = async {
            let reference = self.image_bytes(&chosen)?;
            self.gateway
                .complete(&retrieval.visible_png, &retrieval.input.mask, &reference)
                .await
                .map_err(EngineError::at(Stage::Complete))
        }
        .await;
        let completed = self.time(&mut trace, Stage::Complete, start, completed);
        let output = match completed {
            Ok(img) => {
                let output_ref = format!("{OUTPUT_DIR}/{}.png", file_safe(&qid));
                trace.records.push(JournalRecord::stage(
                    &qid,
                    Stage::Complete,
                    json!({"reference": chosen, "output": output_ref}),
                ));
                run.output_image_ref = Some(output_ref);
                Some(img)
            }
            Err(e) => {
                run.status = RunStatus::CompletionFailed {
                    code: e.code().to_string(),
                    error: e.to_string(),
                };
                None
            }
        };
        (self.close(run, output, trace), None)
    }

    fn base_run(&self, input: &QueryInput, options: &RunOptions) -> PipelineRun {
        PipelineRun {
            query_id: input.query_id.clone(),
            album_id: input.album_id.clone(),
            target_image_id: input.target_image_id.clone(),
            mask_ratio: input.mask_ratio,
            bucket: input.bucket,
            relevant_ids: input.relevant_ids.clone(),
            policy: options.policy,
            k: options.k,
            reasoning_text: None,
            candidates: Vec::new(),
            chosen_reference: None,
            selection_mode: options.selection,
            output_image_ref: None,
            timings_ms: BTreeMap::new(),
            status: RunStatus::Ok,
        }
    }

    fn close(
        &self,
        mut run: PipelineRun,
        output: Option<RgbImage>,
        mut trace: Trace,
    ) -> QueryOutcome {
        run.timings_ms = trace.timings_ms;
        trace.records.push(JournalRecord::result(&run));
        QueryOutcome {
            run,
            output,
            records: trace.records,
        }
    }

    /// Runs every stage of one query. A retrieval failure yields a run with
    /// `Failed` status and is also returned as the error.
    pub async fn run_query_traced(
        &self,
        input: QueryInput,
        options: &RunOptions,
        manual_choice: Option<&str>,
    ) -> (QueryOutcome, Option<EngineError>) {
        let mut trace = Trace::default();
        let base = self.base_run(&input, options);
        if options.selection == SelectionMode::Manual && manual_choice.is_none() {
            let e = EngineError::ManualChoiceRequired;
            return (self.failed(base, Stage::Select, &e, trace), Some(e));
        }
        match self.retrieve(input, options, &mut trace).await {
            Ok(retrieval) => self.finish(retrieval, manual_choice, trace).await,
            Err(e) => (self.close_failed(base, &e, trace), Some(e)),
        }
    }

    /// The outcome of a query whose retrieval failed with `e`.
    pub fn retrieval_failed(
        &self,
        input: &QueryInput,
        options: &RunOptions,
        e: &EngineError,
        trace: Trace,
    ) -> QueryOutcome {
        self.close_failed(self.base_run(input, options), e, trace)
    }

    fn close_failed(&self, base: PipelineRun, e: &EngineError, trace: Trace) -> QueryOutcome {
        let stage = e.stage().unwrap_or(Stage::Load);
        self.failed(base, stage, e, trace)
    }

    fn failed(
        &self,
        mut run: PipelineRun,
        stage: Stage,
        e: &EngineError,
        mut trace: Trace,
    ) -> QueryOutcome {
        trace.records.push(JournalRecord::stage(
            &run.query_id,
            stage,
            json!({"error": e.to_string(), "code": e.code()}),
        ));
        run.status = RunStatus::Failed {
            stage,
            code: e.code().to_string(),
            error: e.to_string(),
        };
        self.close(run, None, trace)
    }

    /// Runs one query. Retrieval and selection errors are returned; a
    /// completion failure is reported in the run status.
    pub async fn run_query(
        &self,
        input: QueryInput,
        options: &RunOptions,
        manual_choice: Option<&str>,
    ) -> Result<QueryOutcome, EngineError> {
        let (outcome, err) = self.run_query_traced(input, options, manual_choice).await;
        if let Some(e) = err {
            return Err(e);
        }
        Ok(outcome)
    }

    /// Runs `cases` under `runs_root/<run_id>`, up to `concurrency` at a
    /// time. Results come back in input order and the journal is written
    /// in input order. Cases already completed in an existing journal are
    /// not re-run.
    pub async fn run_batch(
        &self,
        cases: &[QueryCase],
        config: &BatchConfig,
        runs_root: &Path,
    ) -> Result<Vec<PipelineRun>, EngineError> {
        if config.options.k == 0 {
            return Err(EngineError::Index(IndexError::InvalidK));
        }
        config.options.policy.validate()?;
        if config.options.selection == SelectionMode::Manual {
            return Err(EngineError::ManualChoiceRequired);
        }
        let dir = run_dir(runs_root, &config.run_id);
        fs::create_dir_all(dir.join(OUTPUT_DIR)).map_err(EngineError::io(&dir))?;
        let config_path = dir.join(CONFIG_FILE);
        let mut frozen = config.clone();
        for kind in ProviderKind::ALL {
            if let Some(id) = self.gateway.model_id(kind) {
                frozen.models.insert(kind.as_str().to_string(), id);
            }
        }
        match fs::read_to_string(&config_path) {
            Ok(text) => {
                let previous: BatchConfig =
                    serde_json::from_str(&text).map_err(|e| EngineError::Journal {
                        path: config_path.display().to_string(),
                        message: e.to_string(),
                    })?;
                if previous.options != frozen.options || previous.manifest != frozen.manifest {
                    return Err(EngineError::ConfigMismatch {
                        run_id: config.run_id.clone(),
                    });
                }
            }
            Err(_) => {
                let text = serde_json::to_string_pretty(&frozen).expect("config serialises") + "\n";
                fs::write(&config_path, text).map_err(EngineError::io(&config_path))?;
            }
        }

        let journal = dir.join(JOURNAL_FILE);
        let done = self.compact_journal(&journal)?;
        if !done.is_empty() {
            info!(
                "run {}: resuming, {} queries already complete",
                config.run_id,
                done.len()
            );
        }

        let mut inputs = Vec::with_capacity(cases.len());
        for case in cases {
            if done.contains_key(&case.query_id) {
                inputs.push(None);
            } else {
                inputs.push(Some(self.resolve_case(case)?));
            }
        }

        let options = &config.options;
        let mut runs = Vec::with_capacity(cases.len());
        let mut results = stream::iter(inputs.into_iter().enumerate())
            .map(|(i, input)| async move {
                match input {
                    None => Err(i),
                    Some(input) => Ok(self.run_query_traced(input, options, None).await.0),
                }
            })
            .buffered(config.concurrency.max(1));
        while let Some(result) = results.next().await {
            match result {
                Err(i) => runs.push(done[&cases[i].query_id].clone()),
                Ok(outcome) => {
                    if let (Some(img), Some(rel)) = (&outcome.output, &outcome.run.output_image_ref)
                    {
                        let png = imageio::encode_rgb_png(img)?;
                        imageio::write_file(&dir.join(rel), &png)?;
                    }
                    append_journal(&journal, &outcome.records)?;
                    runs.push(outcome.run);
                }
            }
        }
        Ok(runs)
    }

    /// Drops records of queries without a result record and returns the
    /// completed runs by query id.
    fn compact_journal(&self, journal: &Path) -> Result<HashMap<String, PipelineRun>, EngineError> {
        let records = read_journal(journal)?;
        let done: HashMap<String, PipelineRun> = records
            .iter()
            .filter_map(|r| r.as_run().map(|run| (r.query_id.clone(), run)))
            .collect();
        let kept: Vec<JournalRecord> = records
            .into_iter()
            .filter(|r| done.contains_key(&r.query_id))
            .collect();
        let tmp = journal.with_extension("jsonl.tmp");
        fs::write(&tmp, encode_records(&kept)).map_err(EngineError::io(&tmp))?;
        fs::rename(&tmp, journal).map_err(EngineError::io(journal))?;
        Ok(done)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Album;

    fn cands(ids: &[&str]) -> RankedCandidates {
        RankedCandidates {
            query_id: "q".into(),
            items: ids
                .iter()
                .enumerate()
                .map(|(i, id)| Candidate {
                    image_id: id.to_string(),
                    score: 1.0 - i as f64 * 0.1,
                })
                .collect(),
        }
    }

    fn never() -> Result<String, EngineError> {
        unreachable!()
    }

    #[test]
    fn auto_top1_takes_first() {
        let c = cands(&["b", "a", "c"]);
        assert_eq!(
            select_reference(&c, SelectionMode::AutoTop1, None, never).unwrap(),
            "b"
        );
    }

    #[test]
    fn manual_choice_must_be_a_candidate() {
        let c = cands(&["b", "a"]);
        assert_eq!(
            select_reference(&c, SelectionMode::Manual, Some("a"), never).unwrap(),
            "a"
        );
        assert!(matches!(
            select_reference(&c, SelectionMode::Manual, Some("z"), never),
            Err(EngineError::InvalidManualChoice(_))
        ));
        assert!(matches!(
            select_reference(&c, SelectionMode::Manual, None, never),
            Err(EngineError::ManualChoiceRequired)
        ));
        assert!(select_reference(&c, SelectionMode::AutoTop1, Some("a"), never).is_err());
    }

    fn manifest(sizes: &[usize]) -> Manifest {
        use crate::model::ImageRecord;
        let mut images = Vec::new();
        let mut albums = Vec::new();
        for (a, &n) in sizes.iter().enumerate() {
            let ids: Vec<String> = (0..n).map(|i| format!("a{a}i{i}")).collect();
            for id in &ids {
                images.push(ImageRecord {
                    image_id: id.clone(),
                    file_ref: format!("{id}.png"),
                    width: 8,
                    height: 8,
                    person_boxes: vec![crate::model::PixelBox::new(0, 0, 4, 4)],
                    identity_id: Some(format!("album{a}/id0000")),
                });
            }
            albums.push(Album {
                album_id: format!("album{a}"),
                dominant_identity: format!("album{a}/id0000"),
                image_ids: ids,
            });
        }
        Manifest::new(8, images, albums, Vec::new()).unwrap()
    }

    #[test]
    fn wrong_reference_is_foreign_and_deterministic() {
        let m = manifest(&[3, 2]);
        for seed in 0..50 {
            let id = wrong_reference_sample("q1", "album0", &m, seed).unwrap();
            assert!(id.starts_with("a1"), "{id}");
            assert_eq!(
                id,
                wrong_reference_sample("q1", "album0", &m, seed).unwrap()
            );
        }
        assert!(matches!(
            wrong_reference_sample("q1", "album0", &manifest(&[3]), 0),
            Err(EngineError::SingleAlbum)
        ));
    }
}
