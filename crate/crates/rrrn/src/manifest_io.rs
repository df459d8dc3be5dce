//! Manifest files on disk. A record's `frames_dir` is relative to the
//! directory holding its manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rrrn_core::dataset::{AnnotationRecord, DatasetManifest};

use crate::error::{Error, Result};

/// A parsed manifest together with the directory its paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestFile {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl ManifestFile {
    pub fn frames_dir(&self, record: &AnnotationRecord) -> PathBuf {
        self.root.join(&record.frames_dir)
    }
}

pub fn read_manifest(path: &Path) -> Result<ManifestFile> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let manifest = DatasetManifest::parse_str(&text).map_err(|source| Error::Manifest {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(ManifestFile { manifest, root })
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, manifest.to_text()).map_err(Error::io(path))
}
