//! Artifacts are written to a sibling temp file and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::CliError;

fn temp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{}.tmp", std::process::id()))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => Ok(fs::create_dir_all(dir)?),
        _ => Ok(()),
    }
}

/// Writes via `fill(temp)` then renames over `path`; the temp file is
/// removed on failure.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&Path) -> Result<(), CliError>) -> Result<(), CliError> {
    ensure_parent(path)?;
    let tmp = temp_path(path);
    let result = fill(&tmp).and_then(|()| fs::rename(&tmp, path).map_err(CliError::from));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, |tmp| Ok(fs::write(tmp, bytes)?))
}
