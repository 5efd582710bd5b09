//! Per-run plumbing: config resolution, the reproducibility snapshot, and
//! the stderr JSONL logger.

use std::fs;
use std::path::{Path, PathBuf};

use weft::config::{apply_overrides, RunConfig};
use weft::error::{Result, WeftError};

use crate::CommonArgs;

/// Emits one JSON object per line on standard error.
pub fn log_event(value: serde_json::Value) {
    eprintln!("{value}");
}

/// A command's resolved configuration plus everything the snapshot records.
pub struct RunContext {
    pub cfg: RunConfig,
    /// The --seed flag, when given. Commands decide the fallback.
    pub cli_seed: Option<u64>,
    command: &'static str,
    config_path: Option<PathBuf>,
    overrides: Vec<String>,
}

impl RunContext {
    /// Loads the config (defaults when none is given), applies overrides in
    /// order, and validates. All failures here are config errors.
    pub fn new(command: &'static str, common: &CommonArgs) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        apply_overrides(&mut cfg, &common.overrides)?;
        cfg.validate()?;
        Ok(RunContext {
            cfg,
            cli_seed: common.seed,
            command,
            config_path: common.config.clone(),
            overrides: common.overrides.clone(),
        })
    }

    /// Writes `resolved.toml` and `run.json` into `dir`. `seed` is the seed
    /// the command actually ran with; pointing --config at the snapshot with
    /// the same seed reproduces the run.
    pub fn write_snapshot(&self, dir: &Path, seed: u64) -> Result<()> {
        self.write_snapshot_named(dir, "resolved.toml", "run.json", seed)
    }

    /// Snapshot variant for commands whose --out is a file: the two snapshot
    /// files sit next to it, prefixed by its stem.
    pub fn write_snapshot_for_file(&self, out_file: &Path, seed: u64) -> Result<()> {
        let dir = match out_file.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let stem = out_file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| WeftError::Config(format!("bad output path {}", out_file.display())))?;
        self.write_snapshot_named(
            dir,
            &format!("{stem}.resolved.toml"),
            &format!("{stem}.run.json"),
            seed,
        )
    }

    fn write_snapshot_named(
        &self,
        dir: &Path,
        toml_name: &str,
        json_name: &str,
        seed: u64,
    ) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(toml_name), self.cfg.to_toml()?)?;
        let run = serde_json::json!({
            "command": self.command,
            "seed": seed,
            "config": self.config_path,
            "overrides": self.overrides,
        });
        let mut text = serde_json::to_string_pretty(&run)
            .map_err(|e| WeftError::Config(format!("snapshot serialization: {e}")))?;
        text.push('\n');
        fs::write(dir.join(json_name), text)?;
        log_event(serde_json::json!({
            "event": "run_start",
            "command": self.command,
            "seed": seed,
            "out": dir.to_string_lossy(),
        }));
        Ok(())
    }
}

/// Reads a line-delimited JSON file into typed rows, reporting the line
/// number on parse failures. A missing or malformed input file is a config
/// mistake, caught before any computation.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)
        .map_err(|e| WeftError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| {
            WeftError::Config(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Resolves a manifest-relative path: absolute paths pass through,
/// relative ones attach to the manifest's directory.
pub fn resolve_relative(base_file: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_file.parent().unwrap_or(Path::new(".")).join(p)
    }
}
