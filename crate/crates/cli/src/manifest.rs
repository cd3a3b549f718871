//! CSV manifests with header `path,label,duration_s`.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use log::warn;
use serde::Deserialize;

use mtslvr::audio::read_wav;
use mtslvr::fewshot::LabeledClip;

use crate::error::CliError;

pub const HEADER: [&str; 3] = ["path", "label", "duration_s"];

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    /// As written in the manifest.
    pub path: String,
    pub resolved: PathBuf,
    pub label: String,
    pub duration_s: f64,
    /// 1-based data row, for error messages.
    pub row: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub class_counts: BTreeMap<String, usize>,
    /// Paths listed more than once; only the first row is kept.
    pub duplicates: Vec<String>,
}

#[derive(Deserialize)]
struct RawRow {
    path: String,
    label: String,
    duration_s: String,
}

/// Relative paths resolve against `root`, or the manifest's directory.
pub fn load_manifest(path: &Path, root: Option<&Path>) -> Result<Manifest, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("cannot open manifest {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Data(format!("manifest {}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(CliError::Data(format!(
            "manifest {}: header must be `{}`, got `{}`",
            path.display(),
            HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let base = match root {
        Some(r) => r.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let mut seen = HashSet::new();
    let mut manifest = Manifest {
        rows: Vec::new(),
        class_counts: BTreeMap::new(),
        duplicates: Vec::new(),
    };
    for (i, rec) in reader.deserialize::<RawRow>().enumerate() {
        let row = i + 1;
        let bad = |msg: String| CliError::Data(format!("manifest {} row {row}: {msg}", path.display()));
        let raw = rec.map_err(|e| bad(e.to_string()))?;
        let duration_s: f64 = raw
            .duration_s
            .parse()
            .map_err(|_| bad(format!("duration `{}` is not a number", raw.duration_s)))?;
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(bad(format!("duration must be > 0, got {duration_s}")));
        }
        if raw.path.is_empty() || raw.label.is_empty() {
            return Err(bad("path and label must be non-empty".into()));
        }
        let resolved = base.join(&raw.path);
        if !resolved.is_file() {
            return Err(bad(format!("{} does not exist", resolved.display())));
        }
        if !seen.insert(raw.path.clone()) {
            warn!("manifest row {row}: duplicate path {}, keeping the first", raw.path);
            manifest.duplicates.push(raw.path);
            continue;
        }
        *manifest.class_counts.entry(raw.label.clone()).or_default() += 1;
        manifest.rows.push(ManifestRow {
            path: raw.path,
            resolved,
            label: raw.label,
            duration_s,
            row,
        });
    }
    if manifest.rows.is_empty() {
        return Err(CliError::Data(format!("manifest {} lists no clips", path.display())));
    }
    Ok(manifest)
}

impl Manifest {
    /// Reads every clip, resampled to `sample_rate`; ids are manifest paths.
    pub fn load_audio(&self, sample_rate: u32) -> Result<Vec<LabeledClip>, CliError> {
        self.rows
            .iter()
            .map(|r| {
                let audio = read_wav(&r.resolved)
                    .and_then(|w| w.resample(sample_rate))
                    .map_err(|e| CliError::Data(format!("manifest row {} ({}): {e}", r.row, r.path)))?;
                Ok(LabeledClip {
                    id: r.path.clone(),
                    label: r.label.clone(),
                    audio,
                })
            })
            .collect()
    }
}
