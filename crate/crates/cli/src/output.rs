use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".clgt.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputDir {
    pub root: PathBuf,
    lock: PathBuf,
}

impl OutputDir {
    pub fn claim(root: &Path) -> CliResult<OutputDir> {
        std::fs::create_dir_all(root).map_err(|e| io_error(root, e))?;
        let lock = root.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => CliError::failure(format!(
                    "{} is locked by another run (remove {} if stale)",
                    root.display(),
                    lock.display()
                )),
                _ => io_error(&lock, e),
            })?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn subdir(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.root.join(rel);
        std::fs::create_dir_all(&p).map_err(|e| io_error(&p, e))?;
        Ok(p)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::failure(format!("{}: {e}", path.display()))
}

pub fn create(path: &Path) -> CliResult<File> {
    File::create(path).map_err(|e| io_error(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Config hash, seed and the full resolved config.
pub fn provenance(config: &RunConfig) -> Value {
    json!({
        "config_hash": config.hash(),
        "seed": config.seed,
        "config": config.to_json(),
    })
}

/// The only place wall-clock time appears in outputs.
pub fn metadata(command: &str) -> Value {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    json!({
        "command": command,
        "created_unix": secs,
        "version": env!("CARGO_PKG_VERSION"),
    })
}

/// Pretty JSON with `provenance` and `metadata` fields added to `body`.
pub fn write_json_report(
    path: &Path,
    body: impl Serialize,
    config: &RunConfig,
    command: &str,
) -> CliResult<()> {
    let mut value = serde_json::to_value(body).map_err(|e| CliError::failure(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::failure("report body must be a JSON object"))?;
    obj.insert("provenance".into(), provenance(config));
    obj.insert("metadata".into(), metadata(command));
    write_json(path, &value)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::failure(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}
