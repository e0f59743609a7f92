//! Checkpoints: a directory of MFT1 tensors plus a JSON manifest.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/params/<name>.mft
//! <dir>/buffers/<name>.mft
//! <dir>/momentum/<name>.mft
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::write_bytes;
use crate::error::{Error, Result};
use crate::init::Parametrized;
use crate::model::Model;
use crate::tensor::mft;
use crate::tensor::{Parameter, Tensor};
use crate::train::{Sgd, Trainer};

pub const CHECKPOINT_FORMAT: &str = "mfaf-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
    Momentum,
}

impl TensorKind {
    fn dir(self) -> &'static str {
        match self {
            TensorKind::Param => "params",
            TensorKind::Buffer => "buffers",
            TensorKind::Momentum => "momentum",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    /// Finished epochs.
    pub epoch: usize,
    pub config_hash: String,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

fn entry(kind: TensorKind, p: &Parameter<f32>) -> TensorEntry {
    TensorEntry {
        name: p.name.clone(),
        kind,
        file: format!("{}/{}.mft", kind.dir(), p.name),
        shape: p.value.shape().to_vec(),
    }
}

/// Writes the trainer state. Existing files in `dir` are overwritten.
pub fn save(dir: &Path, trainer: &Trainer) -> Result<()> {
    let m = &trainer.model;
    let mut tensors = Vec::new();
    let mut write = |kind, p: &Parameter<f32>, value: &Tensor<f32>| -> Result<()> {
        let e = entry(kind, p);
        write_bytes(&dir.join(&e.file), &mft::encode(value))?;
        tensors.push(e);
        Ok(())
    };
    for p in m.params() {
        write(TensorKind::Param, p, &p.value)?;
    }
    for p in m.buffers() {
        write(TensorKind::Buffer, p, &p.value)?;
    }
    for (p, v) in m.params().into_iter().zip(&trainer.sgd.velocity) {
        write(TensorKind::Momentum, p, v)?;
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        epoch: trainer.epoch,
        config_hash: trainer.config.hash(),
        config: trainer.config.clone(),
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_bytes(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", m.format)));
    }
    Ok(m)
}

fn load_into(
    dir: &Path,
    manifest: &CheckpointManifest,
    kind: TensorKind,
    name: &str,
    dst: &mut Tensor<f32>,
) -> Result<()> {
    let e = manifest
        .tensors
        .iter()
        .find(|e| e.kind == kind && e.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing {} tensor {name}", kind.dir())))?;
    let t = mft::read::<f32>(dir.join(&e.file))?;
    if t.shape() != dst.shape() {
        return Err(Error::Checkpoint(format!(
            "{name}: stored shape {:?} does not match model shape {:?}",
            t.shape(),
            dst.shape()
        )));
    }
    *dst = t;
    Ok(())
}

/// Restores a trainer, including optimiser momentum and the epoch counter.
/// A `config` passed in must describe the same model as the checkpoint.
pub fn load(dir: &Path, config: Option<&RunConfig>) -> Result<Trainer> {
    let manifest = read_manifest(dir)?;
    let config = match config {
        Some(c) => {
            if c.model_config() != manifest.config.model_config() {
                return Err(Error::Checkpoint(
                    "model configuration differs from the one stored in the checkpoint".into(),
                ));
            }
            c.clone()
        }
        None => manifest.config.clone(),
    };
    let mut model = Model::<f32>::new(&config.model_config(), config.seed)?;
    for p in model.params_mut() {
        let name = p.name.clone();
        load_into(dir, &manifest, TensorKind::Param, &name, &mut p.value)?;
    }
    for p in model.buffers_mut() {
        let name = p.name.clone();
        load_into(dir, &manifest, TensorKind::Buffer, &name, &mut p.value)?;
    }
    let mut sgd = Sgd::new(&model, &config.optim);
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for (name, v) in names.iter().zip(&mut sgd.velocity) {
        load_into(dir, &manifest, TensorKind::Momentum, name, v)?;
    }
    Ok(Trainer {
        config,
        model,
        sgd,
        epoch: manifest.epoch,
    })
}
