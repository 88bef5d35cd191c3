//! Checkpoint directories.
//!
//! * `manifest.json`: parameter `{name, shape, offset}` entries in store
//!   order, `offset` in bytes into `params.bin`.
//! * `params.bin`: little-endian `f64` values, concatenated in manifest order.
//! * `config.txt`: the training configuration, in config-file syntax.
//! * `vocab.txt`: the vocabulary, one token per line.

use std::fs;
use std::path::Path;

use incongruity_core::model::Model;
use incongruity_core::text::Vocabulary;
use incongruity_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::config::{parse_config, render_config};
use crate::dataset::{read_vocabulary, write_vocabulary};
use crate::error::{CliError, CliResult};

const FORMAT: &str = "incongruity-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub params: Vec<ManifestEntry>,
}

pub fn manifest_of(model: &Model) -> Manifest {
    let mut offset = 0;
    let params = model
        .manifest()
        .into_iter()
        .map(|(name, shape)| {
            let entry = ManifestEntry {
                name,
                offset,
                shape: shape.clone(),
            };
            offset += shape.iter().product::<usize>() * 8;
            entry
        })
        .collect();
    Manifest {
        format: FORMAT.into(),
        version: 1,
        params,
    }
}

pub fn save_checkpoint(dir: &Path, model: &Model, config: &TrainConfig, vocab: &Vocabulary) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let manifest = manifest_of(model);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join("manifest.json");
    fs::write(&path, json + "\n").map_err(CliError::io(&path))?;

    let mut bytes = Vec::with_capacity(model.params().num_scalars() * 8);
    for (_, p) in model.params().iter() {
        for v in p.value().data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join("params.bin");
    fs::write(&path, bytes).map_err(CliError::io(&path))?;

    let path = dir.join("config.txt");
    fs::write(&path, render_config(config)).map_err(CliError::io(&path))?;
    write_vocabulary(&dir.join("vocab.txt"), vocab)
}

/// Lists every disagreement between a stored manifest and a model layout.
fn manifest_mismatch(stored: &Manifest, expected: &Manifest) -> Option<String> {
    let mut diffs = Vec::new();
    let n = stored.params.len().max(expected.params.len());
    for i in 0..n {
        match (stored.params.get(i), expected.params.get(i)) {
            (Some(s), Some(e)) if s.name == e.name && s.shape == e.shape => {}
            (Some(s), Some(e)) => diffs.push(format!(
                "#{i}: checkpoint {} {:?} vs model {} {:?}",
                s.name, s.shape, e.name, e.shape
            )),
            (Some(s), None) => diffs.push(format!("#{i}: checkpoint {} {:?} vs model (none)", s.name, s.shape)),
            (None, Some(e)) => diffs.push(format!("#{i}: checkpoint (none) vs model {} {:?}", e.name, e.shape)),
            (None, None) => unreachable!(),
        }
    }
    (!diffs.is_empty()).then(|| diffs.join("; "))
}

pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
}

/// Loads a checkpoint. With `config` given, the model is built from it
/// instead of the stored `config.txt`, and the manifest must match it.
pub fn load_checkpoint(dir: &Path, config: Option<TrainConfig>) -> CliResult<Checkpoint> {
    let config = match config {
        Some(c) => c,
        None => {
            let path = dir.join("config.txt");
            let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
            parse_config(&text, TrainConfig::default())?
        }
    };
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let stored: Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
    if stored.format != FORMAT || stored.version != 1 {
        return Err(CliError::Checkpoint(format!(
            "{}: unsupported format {:?} version {}",
            path.display(),
            stored.format,
            stored.version
        )));
    }

    let mut model = Model::new(config.model.clone(), config.seed)?;
    if let Some(diff) = manifest_mismatch(&stored, &manifest_of(&model)) {
        return Err(CliError::Checkpoint(format!("manifest does not match the model config: {diff}")));
    }

    let path = dir.join("params.bin");
    let bytes = fs::read(&path).map_err(CliError::io(&path))?;
    let expected = model.params().num_scalars() * 8;
    if bytes.len() != expected {
        return Err(CliError::Checkpoint(format!(
            "{}: {} bytes, manifest needs {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for (id, entry) in ids.into_iter().zip(&stored.params) {
        let dst = model.params_mut().value_mut(id).data_mut();
        let src = &bytes[entry.offset..entry.offset + dst.len() * 8];
        for (d, b) in dst.iter_mut().zip(src.chunks_exact(8)) {
            *d = f64::from_le_bytes(b.try_into().expect("8-byte chunk"));
        }
    }
    let vocab = read_vocabulary(&dir.join("vocab.txt"))?;
    Ok(Checkpoint { model, config, vocab })
}
