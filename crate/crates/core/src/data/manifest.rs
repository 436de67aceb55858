//! Cohort manifests: CSV with header `subject_id,age,path,format`, where
//! `path` is relative to the manifest's directory and `format` is `raw` or
//! `nifti`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_nifti, read_raw, sidecar_path, Dataset, VolumeRecord};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    Raw,
    Nifti,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub age: f64,
    pub path: PathBuf,
    pub format: VolumeFormat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    /// Directory that row paths are relative to.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.path)
    }
}

pub fn load_manifest(csv_path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let csv_path = csv_path.as_ref();
    let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest(format!("{}: {e}", csv_path.display())))?;
    if headers.iter().collect::<Vec<_>>() != ["subject_id", "age", "path", "format"] {
        return Err(Error::Manifest(format!(
            "{}: header must be subject_id,age,path,format",
            csv_path.display()
        )));
    }
    let root = csv_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::Manifest(format!("{} row {}: {e}", csv_path.display(), line + 1)))?;
        if !(row.age.is_finite() && row.age > 0.0) {
            return Err(Error::Manifest(format!("subject {}: malformed age {}", row.subject_id, row.age)));
        }
        if !seen.insert(row.subject_id.clone()) {
            return Err(Error::Manifest(format!("duplicate subject id {}", row.subject_id)));
        }
        let file = root.join(&row.path);
        if !file.is_file() {
            return Err(Error::io(
                file,
                std::io::Error::new(std::io::ErrorKind::NotFound, format!("volume for subject {} not found", row.subject_id)),
            ));
        }
        rows.push(row);
    }
    let name = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(DatasetManifest { name, root, rows })
}

pub fn write_manifest(csv_path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let csv_path = csv_path.as_ref();
    let to_err = |e: csv::Error| Error::Manifest(format!("{}: {e}", csv_path.display()));
    let mut w = csv::Writer::from_path(csv_path).map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))
}

/// Reads every volume in manifest order, optionally z-scoring each one.
pub fn load_dataset(manifest: &DatasetManifest, normalize: bool) -> Result<Dataset> {
    let mut records = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        let path = manifest.resolve(row);
        let volume = match row.format {
            VolumeFormat::Raw => read_raw(&path, sidecar_path(&path))?,
            VolumeFormat::Nifti => read_nifti(&path)?,
        };
        records.push(VolumeRecord {
            subject_id: row.subject_id.clone(),
            age: row.age,
            volume,
        });
    }
    let ds = Dataset::new(&manifest.name, records)?;
    if normalize {
        ds.normalized()
    } else {
        Ok(ds)
    }
}
