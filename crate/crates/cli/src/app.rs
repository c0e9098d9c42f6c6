//! Loading configuration and the engine, and writing per-query results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use albumfill_core::engine::{append_journal, Engine, QueryOutcome, JOURNAL_FILE};
use albumfill_core::gateway::{Gateway, ProviderKind};
use albumfill_core::imageio;
use albumfill_core::model::{load_manifest, manifest_root};
use albumfill_core::EmbeddingStore;

use crate::config::{ServiceConfig, CONFIG_FILE};
use crate::error::CliError;

/// Picks the config file: `--config`, then `$AF_CONFIG`, then
/// `./albumfill.toml`, then one next to `--manifest`. Without any of these
/// the defaults apply. `--manifest` always overrides the dataset directory.
pub fn load_config(
    explicit: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<ServiceConfig, CliError> {
    let env_path = std::env::var_os("AF_CONFIG").map(PathBuf::from);
    let candidates = [
        explicit.map(Path::to_path_buf),
        env_path,
        Some(PathBuf::from(CONFIG_FILE)).filter(|p| p.exists()),
        manifest
            .map(|m| manifest_root(m).join(CONFIG_FILE))
            .filter(|p| p.exists()),
    ];
    let mut config = match candidates.into_iter().flatten().next() {
        Some(path) => ServiceConfig::load(&path)?,
        None => ServiceConfig::default(),
    };
    config.apply_env(|k| std::env::var(k).ok());
    if let Some(m) = manifest {
        if m.file_name().is_some_and(|n| n != "manifest.json") {
            return Err(CliError::invalid(format!(
                "{}: the manifest must be named manifest.json inside the dataset directory",
                m.display()
            )));
        }
        config.dataset = manifest_root(m);
    }
    Ok(config)
}

pub fn open_gateway(config: &ServiceConfig, dim: usize) -> Result<Arc<Gateway>, CliError> {
    Ok(Arc::new(Gateway::from_config(&config.gateway, dim)?))
}

/// Manifest, embeddings and gateway for the configured dataset.
pub fn open_engine(config: &ServiceConfig) -> Result<Engine, CliError> {
    config.validate()?;
    let manifest = load_manifest(&config.manifest_path())?;
    let store = EmbeddingStore::load_from_dir(&config.dataset)?;
    let gateway = open_gateway(config, manifest.embedding_dim())?;
    Ok(Engine::new(
        Arc::new(manifest),
        &config.dataset,
        &store,
        gateway,
    )?)
}

/// Model ids recorded in a run's config, so later steps can check them.
pub fn model_ids(gateway: &Gateway) -> BTreeMap<String, String> {
    ProviderKind::ALL
        .into_iter()
        .filter_map(|k| gateway.model_id(k).map(|id| (k.as_str().to_string(), id)))
        .collect()
}

/// Writes an outcome's output image and appends its journal records. Batch
/// runs do the same inside the engine.
pub fn persist_outcome(run_dir: &Path, outcome: &QueryOutcome) -> Result<(), CliError> {
    if let (Some(img), Some(rel)) = (&outcome.output, &outcome.run.output_image_ref) {
        imageio::write_file(&run_dir.join(rel), &imageio::encode_rgb_png(img)?)?;
    }
    append_journal(&run_dir.join(JOURNAL_FILE), &outcome.records)?;
    Ok(())
}

/// Rejects run ids that would escape the runs directory.
pub fn check_run_id(run_id: &str) -> Result<(), CliError> {
    if run_id.is_empty()
        || albumfill_core::pipeline::file_safe(run_id) != run_id
        || run_id.starts_with('.')
    {
        return Err(CliError::invalid(format!(
            "run id {run_id:?} must be a plain name"
        )));
    }
    Ok(())
}
