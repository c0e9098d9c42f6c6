//! Subcommand implementations. Each returns the text to print on success.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use albumfill_core::compose::{visible_region_png, CompositionPolicy};
use albumfill_core::engine::{
    load_runs, run_dir, BatchConfig, Engine, PipelineRun, QueryInput, RunOptions, RunStatus,
    SelectionMode, Trace, CONFIG_FILE,
};
use albumfill_core::eval::{
    aggregate, aggregate_completion, evaluate_completion as score_completion, Arm, CompletionArm,
    CompletionOptions, EncoderKind, Grouping, RecallMode,
};
use albumfill_core::gateway::config::{GatewayConfig, ProviderEndpoint};
use albumfill_core::gateway::{Gateway, ProviderKind};
use albumfill_core::imageio;
use albumfill_core::judge::{judge_batch, JudgeCase};
use albumfill_core::mask::{Bucket, Mask};
use albumfill_core::model::{load_manifest, Manifest};
use albumfill_core::pipeline::{
    file_safe, run_pipeline, write_pipeline_output, PipelineConfig, QueryGenConfig, RawManifest,
};
use albumfill_core::{EmbeddingSource, EmbeddingStore};
use log::{info, warn};
use serde_json::json;

use crate::app::{check_run_id, model_ids, open_engine, open_gateway, persist_outcome};
use crate::config::ServiceConfig;
use crate::error::CliError;
use crate::reports;

pub const DEFAULT_KS: [usize; 5] = [1, 5, 10, 25, 50];

const PROVIDER_CODES: [&str; 8] = [
    "timeout",
    "unavailable",
    "empty_response",
    "dim_mismatch",
    "shape_mismatch",
    "rejected",
    "malformed",
    "not_configured",
];

// ---------------------------------------------------------------------------
// build-dataset

pub struct BuildDataset {
    pub raw: PathBuf,
    pub embeddings: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub cluster_threshold: Option<f64>,
    pub relevance_threshold: Option<f64>,
    pub masks_per_image: usize,
    pub bucket: Option<Bucket>,
    pub threads: Option<usize>,
}

pub fn build_dataset(args: &BuildDataset) -> Result<String, CliError> {
    let raw = RawManifest::load(&args.raw)?;
    let gt = EmbeddingStore::load(&args.embeddings)?;
    let defaults = PipelineConfig::default();
    let config = PipelineConfig {
        seed: args.seed,
        cluster_threshold: args.cluster_threshold.unwrap_or(defaults.cluster_threshold),
        query: QueryGenConfig {
            relevance_threshold: args
                .relevance_threshold
                .unwrap_or(defaults.query.relevance_threshold),
            masks_per_image: args.masks_per_image,
            bucket: args.bucket,
        },
        threads: args.threads,
    };
    let built = run_pipeline(&raw, &gt, &config)?;
    write_pipeline_output(&built, &args.out)?;

    // Images stay where the raw manifest points; copy them when the
    // dataset is written somewhere else.
    let source = args.raw.parent().unwrap_or(Path::new("."));
    for img in built.manifest.images() {
        let (from, to) = (source.join(&img.file_ref), args.out.join(&img.file_ref));
        if !to.exists() && from.exists() {
            if let Some(dir) = to.parent() {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            std::fs::copy(&from, &to).map_err(|e| CliError::io(&to, e))?;
        }
    }
    let r = &built.report;
    Ok(format!(
        "{} images in, {} kept, {} albums formed of {}, {} queries ({} unjudgeable), {} masks skipped\nwrote {}\n",
        r.images_in,
        r.images_kept,
        r.albums_formed,
        r.albums_in,
        r.queries,
        r.unjudgeable_queries,
        r.masks_skipped.len(),
        args.out.display()
    ))
}

// ---------------------------------------------------------------------------
// index

pub async fn index(config: &ServiceConfig, out: Option<&Path>) -> Result<String, CliError> {
    config.validate()?;
    let manifest = load_manifest(&config.manifest_path())?;
    let gateway = open_gateway(config, manifest.embedding_dim())?;
    let mut store = EmbeddingStore::new(manifest.embedding_dim());
    for img in manifest.images() {
        let bytes = imageio::read_file(&config.dataset.join(&img.file_ref))?;
        let v = gateway.embed_image(&bytes).await?;
        store.insert(img.image_id.clone(), v.with_source(EmbeddingSource::Image))?;
    }
    let path = out.map_or_else(|| config.dataset.join("embeddings.bin"), Path::to_path_buf);
    store.save(&path)?;
    Ok(format!(
        "indexed {} images into {}\n",
        store.len(),
        path.display()
    ))
}

// ---------------------------------------------------------------------------
// retrieve / complete

/// Which query to run: a manifest query case, or an album image with a
/// mask file.
#[derive(Debug, Clone, Default)]
pub struct QuerySpec {
    pub query: Vec<String>,
    pub album: Option<String>,
    pub target: Option<String>,
    pub mask: Option<PathBuf>,
    pub query_id: Option<String>,
}

impl QuerySpec {
    fn is_adhoc(&self) -> bool {
        self.album.is_some() || self.target.is_some() || self.mask.is_some()
    }

    fn single(&self, engine: &Engine) -> Result<QueryInput, CliError> {
        if self.is_adhoc() {
            if !self.query.is_empty() {
                return Err(CliError::invalid(
                    "--query cannot be combined with --album/--target/--mask",
                ));
            }
            let (Some(album), Some(target), Some(mask)) = (&self.album, &self.target, &self.mask)
            else {
                return Err(CliError::invalid(
                    "an ad-hoc query needs --album, --target and --mask",
                ));
            };
            let mask = Mask::load(mask)?;
            let qid = self
                .query_id
                .clone()
                .unwrap_or_else(|| format!("{album}-{target}"));
            return Ok(engine.adhoc_input(qid, album, target, mask)?);
        }
        match self.query.as_slice() {
            [one] => Ok(engine.resolve_case(find_case(engine.manifest(), one)?)?),
            [] => Err(CliError::invalid("give --query or --album/--target/--mask")),
            _ => Err(CliError::invalid("this command takes one query")),
        }
    }
}

fn find_case<'m>(
    manifest: &'m Manifest,
    id: &str,
) -> Result<&'m albumfill_core::QueryCase, CliError> {
    manifest
        .query(id)
        .ok_or_else(|| CliError::new("not_found", format!("no query {id:?} in the manifest")))
}

#[derive(Debug, Clone)]
pub struct QueryOptions {
    pub k: Option<usize>,
    pub compose_mode: Option<String>,
    pub alpha: Option<f64>,
    pub selection: SelectionMode,
    pub seed: Option<u64>,
}

impl QueryOptions {
    pub fn resolve(&self, config: &ServiceConfig) -> Result<RunOptions, CliError> {
        let policy = match (&self.compose_mode, self.alpha) {
            (None, None) => config.compose,
            (None, Some(alpha)) => match config.compose {
                CompositionPolicy::InternalFusion { .. } => {
                    CompositionPolicy::parse("internal_fusion", Some(alpha))
                }
                other => Err(format!(
                    "--alpha only applies to internal_fusion, not {}",
                    other.mode_name()
                )),
            }
            .map_err(CliError::invalid)?,
            (Some(mode), alpha) => {
                CompositionPolicy::parse(mode, alpha).map_err(CliError::invalid)?
            }
        };
        let k = self.k.unwrap_or(config.k);
        if k == 0 {
            return Err(CliError::invalid("--k must be at least 1"));
        }
        Ok(RunOptions {
            k,
            policy,
            selection: self.selection,
            seed: self.seed.unwrap_or(config.seed),
            ..Default::default()
        })
    }
}

pub async fn retrieve(
    config: &ServiceConfig,
    spec: &QuerySpec,
    opts: &QueryOptions,
    as_json: bool,
) -> Result<String, CliError> {
    let engine = open_engine(config)?;
    let input = spec.single(&engine)?;
    let options = opts.resolve(config)?;
    let retrieval = engine
        .retrieve(input, &options, &mut Trace::default())
        .await?;
    let items = &retrieval.candidates.items;
    if as_json {
        let value = json!({
            "query_id": retrieval.input.query_id,
            "reasoning_text": retrieval.reasoning_text,
            "candidates": items,
        });
        return Ok(serde_json::to_string_pretty(&value).expect("json") + "\n");
    }
    if let Some(text) = &retrieval.reasoning_text {
        eprintln!("reasoning: {text}");
    }
    let mut out = String::new();
    for c in items {
        writeln!(out, "{}\t{:.6}", c.image_id, c.score).unwrap();
    }
    Ok(out)
}

pub struct Complete {
    pub run: String,
    pub spec: QuerySpec,
    pub options: QueryOptions,
    pub choice: Option<String>,
    pub concurrency: Option<usize>,
}

fn failure_summary(runs: &[PipelineRun]) -> Option<CliError> {
    let failed: Vec<(&str, &str)> = runs
        .iter()
        .filter_map(|r| match &r.status {
            RunStatus::Ok => None,
            RunStatus::CompletionFailed { code, .. } | RunStatus::Failed { code, .. } => {
                Some((r.query_id.as_str(), code.as_str()))
            }
        })
        .collect();
    let (first_id, first_code) = *failed.first()?;
    let mut e = CliError::new(
        first_code,
        format!(
            "{} of {} queries failed (first: {first_id}); see the run journal",
            failed.len(),
            runs.len()
        ),
    );
    e.provider = PROVIDER_CODES.contains(&first_code);
    Some(e)
}

fn summarise(runs: &[PipelineRun]) -> String {
    let mut out = String::new();
    for r in runs {
        let status = match &r.status {
            RunStatus::Ok => "ok".to_string(),
            RunStatus::CompletionFailed { code, .. } => format!("completion_failed:{code}"),
            RunStatus::Failed { stage, code, .. } => format!("failed:{stage}:{code}"),
        };
        writeln!(
            out,
            "{}\t{status}\t{}\t{}",
            r.query_id,
            r.chosen_reference.as_deref().unwrap_or("-"),
            r.output_image_ref.as_deref().unwrap_or("-")
        )
        .unwrap();
    }
    out
}

/// Full pipeline runs journaled under `runs/<run>`. Manifest queries go
/// through the batch runner; a single ad-hoc or manually selected query is
/// run directly with the same stages.
pub async fn complete(config: &ServiceConfig, args: &Complete) -> Result<String, CliError> {
    check_run_id(&args.run)?;
    let engine = open_engine(config)?;
    let options = args.options.resolve(config)?;
    let dir = run_dir(&config.runs, &args.run);
    let single = args.spec.is_adhoc() || options.selection == SelectionMode::Manual;
    if args.choice.is_some() && options.selection != SelectionMode::Manual {
        return Err(CliError::invalid("--choice needs --selection manual"));
    }

    let runs = if single {
        let input = args.spec.single(&engine)?;
        if input.query_id != file_safe(&input.query_id) {
            return Err(CliError::invalid(format!(
                "query id {:?} is not a plain name",
                input.query_id
            )));
        }
        let mut batch = BatchConfig::new(args.run.clone(), options.clone());
        batch.models = model_ids(engine.gateway());
        ensure_run_config(&dir, &batch)?;
        if args.spec.is_adhoc() {
            let path = dir.join(format!("masks/{}.png", file_safe(&input.query_id)));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
            }
            input.mask.save(&path)?;
        }
        let (outcome, err) = engine
            .run_query_traced(input, &options, args.choice.as_deref())
            .await;
        persist_outcome(&dir, &outcome)?;
        if let Some(e) = err {
            return Err(e.into());
        }
        vec![outcome.run]
    } else {
        let manifest = engine.manifest();
        let cases: Vec<albumfill_core::QueryCase> = if args.spec.query.is_empty() {
            manifest.queries().to_vec()
        } else {
            args.spec
                .query
                .iter()
                .map(|q| find_case(manifest, q).cloned())
                .collect::<Result<_, _>>()?
        };
        let mut batch = BatchConfig::new(args.run.clone(), options)
            .with_concurrency(args.concurrency.unwrap_or(config.concurrency));
        batch.manifest = Some(config.manifest_path().display().to_string());
        engine.run_batch(&cases, &batch, &config.runs).await?
    };
    info!("run {} written to {}", args.run, dir.display());
    match failure_summary(&runs) {
        Some(e) => {
            eprint!("{}", summarise(&runs));
            Err(e)
        }
        None => Ok(summarise(&runs)),
    }
}

/// Writes `config.json` for a directly run query unless the run has one.
pub fn ensure_run_config(dir: &Path, batch: &BatchConfig) -> Result<(), CliError> {
    let path = dir.join(CONFIG_FILE);
    if path.exists() {
        return Ok(());
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let text = serde_json::to_string_pretty(batch).expect("config serialises") + "\n";
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

// ---------------------------------------------------------------------------
// evaluation

fn load_arm_runs(config: &ServiceConfig, run: &str) -> Result<Vec<PipelineRun>, CliError> {
    check_run_id(run)?;
    let dir = run_dir(&config.runs, run);
    let runs = load_runs(&dir)?;
    if runs.is_empty() {
        return Err(CliError::new(
            "no_runs",
            format!("{}: no completed queries", dir.display()),
        ));
    }
    Ok(runs)
}

fn grouping(by_bucket: bool, compare: &[String]) -> Grouping {
    match (by_bucket, compare.is_empty()) {
        (true, _) => Grouping::ByBucket,
        (false, true) => Grouping::Overall,
        (false, false) => Grouping::ByArm,
    }
}

fn fingerprint_source(config: &ServiceConfig, run: &str) -> String {
    std::fs::read_to_string(run_dir(&config.runs, run).join(CONFIG_FILE)).unwrap_or_default()
}

pub struct EvaluateRetrieval {
    pub run: String,
    pub ks: Option<Vec<usize>>,
    pub by_bucket: bool,
    pub compare: Vec<String>,
    pub coverage: bool,
}

pub fn evaluate_retrieval(
    config: &ServiceConfig,
    args: &EvaluateRetrieval,
) -> Result<String, CliError> {
    let mut arms = Vec::new();
    for run in std::iter::once(&args.run).chain(&args.compare) {
        arms.push(Arm::from_runs(run.clone(), load_arm_runs(config, run)?));
    }
    let ks = match &args.ks {
        Some(ks) => ks.clone(),
        None => {
            let depth = arms
                .iter()
                .flat_map(|a| a.runs.iter().map(|r| r.k))
                .min()
                .unwrap_or(1);
            DEFAULT_KS.into_iter().filter(|k| *k <= depth).collect()
        }
    };
    let mode = if args.coverage {
        RecallMode::Coverage
    } else {
        RecallMode::HitRate
    };
    let report = aggregate(&arms, &ks, grouping(args.by_bucket, &args.compare), mode)?
        .with_fingerprint(&fingerprint_source(config, &args.run));
    let md = report.to_markdown();
    let value = serde_json::to_value(&report).expect("report serialises");
    reports::write_section(&run_dir(&config.runs, &args.run), "retrieval", &value, &md)?;
    Ok(md)
}

pub struct EvaluateCompletion {
    pub run: String,
    pub by_bucket: bool,
    pub compare: Vec<String>,
    pub masked_only: bool,
    pub encoders: Option<Vec<EncoderKind>>,
}

pub fn parse_encoder(s: &str) -> Result<EncoderKind, String> {
    EncoderKind::ALL
        .into_iter()
        .find(|e| e.label().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown encoder {s:?}; expected clip, dino, dreamsim or lpips"))
}

/// The mask a run was made with: the manifest query's, or the one saved
/// with an ad-hoc query.
fn run_mask(engine: &Engine, dir: &Path, run: &PipelineRun) -> Result<Mask, CliError> {
    if let Some(case) = engine.manifest().query(&run.query_id) {
        if case.target_image_id == run.target_image_id {
            return Ok(Mask::load(&engine.root().join(&case.mask.mask_ref))?);
        }
    }
    let path = dir.join(format!("masks/{}.png", file_safe(&run.query_id)));
    Mask::load(&path).map_err(|e| CliError::new("mask_shape", format!("{}: {e}", path.display())))
}

pub async fn evaluate_completion(
    config: &ServiceConfig,
    args: &EvaluateCompletion,
) -> Result<String, CliError> {
    let engine = open_engine(config)?;
    let options = CompletionOptions {
        encoders: args
            .encoders
            .clone()
            .unwrap_or_else(|| EncoderKind::ALL.to_vec()),
        masked_only: args.masked_only,
    };
    let mut arms = Vec::new();
    for run in std::iter::once(&args.run).chain(&args.compare) {
        let dir = run_dir(&config.runs, run);
        let mut samples = Vec::new();
        for r in load_arm_runs(config, run)? {
            let Some(output_ref) = r.output_image_ref.as_ref().filter(|_| r.is_ok()) else {
                continue;
            };
            let output = imageio::decode_rgb(&imageio::read_file(&dir.join(output_ref))?)?;
            let original = engine.load_image(&r.target_image_id)?;
            let mask = run_mask(&engine, &dir, &r)?;
            samples.push(
                score_completion(
                    &r.query_id,
                    r.bucket,
                    &output,
                    &original,
                    &mask,
                    engine.gateway(),
                    &options,
                )
                .await?,
            );
        }
        if samples.is_empty() {
            warn!("run {run} has no completed outputs");
        }
        arms.push(CompletionArm {
            name: run.clone(),
            samples,
        });
    }
    let report = aggregate_completion(&arms, grouping(args.by_bucket, &args.compare))?
        .with_fingerprint(&fingerprint_source(config, &args.run));
    let md = report.to_markdown();
    let value = serde_json::to_value(&report).expect("report serialises");
    reports::write_section(&run_dir(&config.runs, &args.run), "completion", &value, &md)?;
    Ok(md)
}

// ---------------------------------------------------------------------------
// judge

/// A judge endpoint named in the config, or a base URL.
fn judge_gateway(config: &ServiceConfig, endpoint: &str, dim: usize) -> Result<Gateway, CliError> {
    let mut e = match config.judges.get(endpoint) {
        Some(e) => e.clone(),
        None if endpoint.starts_with("http://") || endpoint.starts_with("https://") => {
            let mut e = ProviderEndpoint::new(ProviderKind::Judge, endpoint);
            e.token = std::env::var("AF_JUDGE_TOKEN").ok();
            e
        }
        None => {
            return Err(CliError::config(format!(
                "no judge endpoint named {endpoint:?} (known: {})",
                config.judges.keys().cloned().collect::<Vec<_>>().join(", ")
            )))
        }
    };
    e.kind = ProviderKind::Judge;
    let gw = GatewayConfig {
        endpoints: vec![e],
        mock: None,
        backoff_ms: config.gateway.backoff_ms,
    };
    Ok(Gateway::from_config(&gw, dim)?)
}

pub struct Judge {
    pub run: String,
    pub judge_endpoint: Option<String>,
    pub concurrency: Option<usize>,
}

pub async fn judge(config: &ServiceConfig, args: &Judge) -> Result<String, CliError> {
    let engine = open_engine(config)?;
    let dir = run_dir(&config.runs, &args.run);
    let runs = load_arm_runs(config, &args.run)?;
    let mut cases = Vec::new();
    for r in runs.iter().filter(|r| r.has_candidates()) {
        let target = engine.image_bytes(&r.target_image_id)?;
        let mask = run_mask(&engine, &dir, r)?;
        let masked_png = visible_region_png(&target, &mask)
            .map_err(|e| CliError::new("image", e.to_string()))?;
        cases.push(JudgeCase {
            query_id: r.query_id.clone(),
            masked_png,
            instruction: r.reasoning_text.clone(),
        });
    }
    let recorded: BTreeMap<String, String> = std::fs::read_to_string(dir.join(CONFIG_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<BatchConfig>(&t).ok())
        .map(|c| c.models)
        .unwrap_or_default();
    let reasoning_model = recorded
        .get(ProviderKind::Reasoning.as_str())
        .cloned()
        .or_else(|| engine.gateway().model_id(ProviderKind::Reasoning));
    let dim = engine.manifest().embedding_dim();
    let custom;
    let gateway = match &args.judge_endpoint {
        Some(name) => {
            custom = judge_gateway(config, name, dim)?;
            &custom
        }
        None => engine.gateway().as_ref(),
    };
    if !gateway.supports(ProviderKind::Judge) {
        return Err(CliError::config(
            "no judge endpoint configured; pass --judge-endpoint",
        ));
    }
    let report = judge_batch(
        &cases,
        gateway,
        reasoning_model.as_deref(),
        args.concurrency.unwrap_or(config.concurrency),
    )
    .await?;
    let md = reports::judge_markdown(&report);
    let value = serde_json::to_value(&report).expect("report serialises");
    reports::write_section(&dir, "judge", &value, &md)?;
    Ok(md)
}

// ---------------------------------------------------------------------------
// report

pub fn report(config: &ServiceConfig, run: &str) -> Result<String, CliError> {
    check_run_id(run)?;
    let dir = run_dir(&config.runs, run);
    reports::assemble(&dir)?;
    let path = dir.join(reports::REPORT_MD);
    std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))
}
