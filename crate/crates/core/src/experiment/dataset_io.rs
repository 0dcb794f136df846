//! Dataset directories: `manifest.json` plus one JSON document per client.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{ClientDataset, ToyDatasetSpec};
use crate::error::{FlicError, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "flic-dataset";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub client_id: usize,
    pub file: String,
    pub dim: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub num_classes: usize,
    pub clients: Vec<ManifestEntry>,
    /// Generator settings, when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ToyDatasetSpec>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| FlicError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| FlicError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| FlicError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FlicError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_dataset(dir: &Path, clients: &[ClientDataset], num_classes: usize, spec: Option<&ToyDatasetSpec>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FlicError::io(dir, e))?;
    let mut entries = Vec::with_capacity(clients.len());
    for c in clients {
        let file = format!("client_{:05}.json", c.client_id);
        write_json(&dir.join(&file), c)?;
        entries.push(ManifestEntry {
            client_id: c.client_id,
            file,
            dim: c.dim,
            samples: c.features.nrows(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        num_classes,
        clients: entries,
        spec: spec.cloned(),
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

/// Clients in manifest order, checked against the manifest and each other.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<ClientDataset>)> {
    let mpath = dir.join(MANIFEST);
    let manifest: Manifest = read_json(&mpath)?;
    let bad = |path: &Path, message: String| FlicError::Format {
        path: path.to_path_buf(),
        message,
    };
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(bad(&mpath, format!("unsupported format {} v{}", manifest.format, manifest.version)));
    }
    let mut clients = Vec::with_capacity(manifest.clients.len());
    for (pos, entry) in manifest.clients.iter().enumerate() {
        if entry.file.contains('/') || entry.file.contains('\\') || entry.file.starts_with('.') {
            return Err(bad(&mpath, format!("client file name {:?} leaves the dataset directory", entry.file)));
        }
        let path = dir.join(&entry.file);
        let c: ClientDataset = read_json(&path)?;
        if c.client_id != entry.client_id || c.client_id != pos || c.dim != entry.dim || c.features.nrows() != entry.samples {
            return Err(bad(&path, "client document disagrees with the manifest".into()));
        }
        c.validate().map_err(|e| bad(&path, e.to_string()))?;
        if let Some(&y) = c.classes.iter().find(|&&y| y >= manifest.num_classes) {
            return Err(bad(&path, format!("class {y} outside [0, {})", manifest.num_classes)));
        }
        clients.push(c);
    }
    Ok((manifest, clients))
}
