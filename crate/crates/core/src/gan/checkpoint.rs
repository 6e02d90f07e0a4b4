//! Parameter checkpoints: concatenated tensor records plus a JSON manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{load_all, save_all};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub entries: Vec<EntryInfo>,
}

pub fn checkpoint_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.json")), dir.join(format!("{name}.imt")))
}

pub fn save_checkpoint<C: Serialize>(
    dir: &Path,
    name: &str,
    kind: &str,
    config: &C,
    step: u64,
    store: &ParamStore,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (manifest_path, data_path) = checkpoint_paths(dir, name);
    let manifest = Manifest {
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        step,
        entries: store
            .iter()
            .map(|(_, e)| EntryInfo {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect(),
    };
    let tensors: Vec<_> = store.iter().map(|(_, e)| e.value.clone()).collect();
    save_all(&data_path, &tensors)?;
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path, name: &str) -> Result<Manifest> {
    let (manifest_path, _) = checkpoint_paths(dir, name);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io_at(&manifest_path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads the manifest and overwrites `store`'s values (names and shapes
/// must match).
pub fn load_checkpoint(dir: &Path, name: &str, store: &mut ParamStore) -> Result<Manifest> {
    let manifest = read_manifest(dir, name)?;
    let (_, data_path) = checkpoint_paths(dir, name);
    let tensors = load_all(data_path)?;
    if tensors.len() != manifest.entries.len() {
        return Err(Error::TensorFormat(format!(
            "manifest lists {} entries, data holds {}",
            manifest.entries.len(),
            tensors.len()
        )));
    }
    let values = manifest.entries.iter().map(|e| e.name.clone()).zip(tensors).collect();
    store.load_values(values)?;
    Ok(manifest)
}
