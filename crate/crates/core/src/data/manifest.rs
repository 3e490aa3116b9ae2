use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::SynthSpec;
use super::volume::{load_volume, save_volume, Volume};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "siam3d-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub class_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub extent: usize,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
    pub seed: Option<u64>,
    pub synth: Option<SynthSpec>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self, path: &Path) -> Result<()> {
        let bad = |detail: String| Error::Format {
            path: path.into(),
            detail,
        };
        if self.format != DATASET_FORMAT {
            return Err(bad(format!("not a dataset manifest (format {:?})", self.format)));
        }
        if self.version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                path: path.into(),
                found: self.version,
                expected: DATASET_VERSION,
            });
        }
        let mut seen = HashSet::new();
        let mut counts = vec![0usize; self.class_names.len()];
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(bad(format!("duplicate sample id {}", e.id)));
            }
            match counts.get_mut(e.label) {
                Some(c) => *c += 1,
                None => return Err(bad(format!("sample {} has unknown label {}", e.id, e.label))),
            }
        }
        if counts != self.class_counts {
            return Err(bad(format!(
                "class counts {:?} disagree with entries {:?}",
                self.class_counts, counts
            )));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

/// The manifest path for a dataset directory or manifest file.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, volumes: &[Volume]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (entry, vol) in manifest.entries.iter().zip(volumes) {
        save_volume(&dir.join(&entry.path), vol)?;
    }
    let json = serde_json::to_string_pretty(manifest)?;
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let p = manifest_path(path);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: p.clone(),
        detail: e.to_string(),
    })?;
    manifest.validate(&p)?;
    Ok(manifest)
}

/// Reads the manifest and every volume it lists.
pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<Volume>)> {
    let p = manifest_path(path);
    let manifest = read_manifest(&p)?;
    let root = p.parent().unwrap_or(Path::new("."));
    let mut volumes = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let vp = root.join(&e.path);
        let v = load_volume(&vp)?;
        let want = [manifest.extent; 3];
        if v.id != e.id || v.label != e.label || v.extents != want {
            return Err(Error::Format {
                path: vp,
                detail: format!("volume disagrees with manifest entry {}", e.id),
            });
        }
        volumes.push(v);
    }
    Ok((manifest, volumes))
}
