//! Dataset and model-bundle resolution shared by the commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weft::checkpoint;
use weft::config::{DataSource, RunConfig};
use weft::data_engine::{Manifest, MANIFEST_NAME};
use weft::dataset::DatasetRecord;
use weft::error::{Result, WeftError};
use weft::pipeline::ModelBundle;
use weft::toy::make_toy_dataset;

use crate::context::log_event;

/// File name train writes its archive under.
pub const CHECKPOINT_FILE: &str = "checkpoint.weft";

/// Accepts either the archive itself or a train output directory.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

fn records_from_dir(dir: &Path) -> Result<Vec<DatasetRecord>> {
    let manifest_path = if dir.is_dir() { dir.join(MANIFEST_NAME) } else { dir.to_path_buf() };
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Manifest::load(&manifest_path)?.load_records(&base)
}

/// Loads the training/inference records: an explicit --data directory wins,
/// otherwise the [data] section picks the generator or a manifest.
pub fn load_records(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<Vec<DatasetRecord>> {
    if let Some(dir) = data_dir {
        return records_from_dir(dir);
    }
    match cfg.data.source {
        DataSource::Toy => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
            make_toy_dataset(cfg.data.size, &mut rng)
        }
        DataSource::Manifest => {
            // validate() guarantees the path is present.
            let path = cfg.data.manifest.as_deref().expect("validated manifest path");
            records_from_dir(Path::new(path))
        }
    }
}

/// When a checkpoint carries its model/schedule configuration, adopt it so
/// the rebuilt network matches the stored parameters. Returns true if the
/// run config was changed.
pub fn adopt_checkpoint_config(
    cfg: &mut RunConfig,
    meta: &BTreeMap<String, String>,
) -> Result<bool> {
    let mut changed = false;
    if let Some(text) = meta.get("model") {
        let model = serde_json::from_str(text)
            .map_err(|e| WeftError::Checkpoint(format!("stored model config: {e}")))?;
        if cfg.model != model {
            cfg.model = model;
            changed = true;
        }
    }
    if let Some(text) = meta.get("schedule") {
        let schedule = serde_json::from_str(text)
            .map_err(|e| WeftError::Checkpoint(format!("stored schedule config: {e}")))?;
        if cfg.schedule != schedule {
            cfg.schedule = schedule;
            changed = true;
        }
    }
    if cfg.sampler.steps > cfg.schedule.steps {
        return Err(WeftError::Config(format!(
            "sampler.steps ({}) cannot exceed the checkpoint schedule length ({})",
            cfg.sampler.steps, cfg.schedule.steps
        )));
    }
    Ok(changed)
}

/// Builds the inference bundle: fresh networks from the (possibly adopted)
/// config, parameters loaded from the checkpoint when one is given, and the
/// sampler options applied. A missing control branch in the checkpoint is
/// fine; the fresh branch is neutral until trained.
pub fn build_bundle(cfg: &mut RunConfig, checkpoint_arg: Option<&Path>) -> Result<ModelBundle> {
    let path = checkpoint_arg.map(resolve_checkpoint);
    if let Some(ref p) = path {
        let meta = checkpoint::read_meta(p)?;
        if adopt_checkpoint_config(cfg, &meta)? {
            log_event(serde_json::json!({
                "event": "config_from_checkpoint",
                "checkpoint": p.to_string_lossy(),
            }));
        }
    }
    let mut bundle = ModelBundle::fresh(&cfg.model, &cfg.schedule, true)?;
    if let Some(ref p) = path {
        let report = checkpoint::load_into(p, &mut bundle.set, true)?;
        log_event(serde_json::json!({
            "event": "checkpoint_loaded",
            "checkpoint": p.to_string_lossy(),
            "loaded": report.loaded.len(),
            "skipped": report.skipped.len(),
        }));
    }
    bundle.options = cfg.sampler.pipeline_options();
    Ok(bundle)
}
