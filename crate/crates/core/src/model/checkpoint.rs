//! Checkpoints: `manifest.json` plus `params.bin`, a little-endian f32 blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FormNetV2, ModelConfig};
use crate::data::Vocabulary;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: Vec<ParamEntry>,
    /// Free-form echo of the run that wrote the checkpoint.
    #[serde(default)]
    pub run: serde_json::Value,
}

pub struct Checkpoint {
    pub model: FormNetV2,
    pub vocab: Vocabulary,
    pub manifest: Manifest,
}

pub fn save_checkpoint(dir: &Path, model: &FormNetV2, vocab: &Vocabulary, run: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.num_parameters() * 4);
    let mut entries = Vec::with_capacity(model.params().len());
    for p in model.params() {
        let offset = blob.len();
        for v in p.tensor.to_f32_vec() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        seed: model.seed(),
        config: model.config().clone(),
        vocab: vocab.clone(),
        params: entries,
        run,
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Rebuilds the model from its config and overwrites every parameter.
/// Names and shapes must match the freshly built model exactly.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = load_manifest(dir)?;
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let model = FormNetV2::new(&manifest.config, manifest.seed)?;
    if model.params().len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, the model has {}",
            manifest.params.len(),
            model.params().len()
        )));
    }
    for (p, entry) in model.params().iter().zip(&manifest.params) {
        if p.name != entry.name || p.tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` {:?} does not match `{}` {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.tensor.shape()
            )));
        }
        if entry.bytes != p.tensor.numel() * 4 || entry.offset + entry.bytes > blob.len() {
            return Err(Error::Checkpoint(format!("parameter `{}` has a bad byte range", entry.name)));
        }
        let values: Vec<f64> = blob[entry.offset..entry.offset + entry.bytes]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        p.tensor.set_data(&values)?;
    }
    Ok(Checkpoint {
        model,
        vocab: manifest.vocab.clone(),
        manifest,
    })
}
