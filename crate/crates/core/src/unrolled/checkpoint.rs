//! Checkpoint directory: `checkpoint.json` plus one MELT file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{NetConfig, UnrolledNetParams};
use crate::error::{Error, Result};
use crate::tensor::melt;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKPOINT_FORMAT: &str = "modl-mel-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub file: String,
    pub regularizer: usize,
    pub layer: usize,
    pub kind: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: NetConfig,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &UnrolledNetParams,
    seed: u64,
    step: u64,
) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (r, reg) in params.regs.iter().enumerate() {
        for (l, layer) in reg.layers.iter().enumerate() {
            for (kind, t) in [("weight", &layer.weight), ("bias", &layer.bias)] {
                let file = format!("r{r}_l{l}_{kind}.melt");
                melt::write_real(dir.join(&file), t)?;
                tensors.push(TensorEntry {
                    file,
                    regularizer: r,
                    layer: l,
                    kind: kind.to_string(),
                    shape: t.shape().to_vec(),
                });
            }
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config: params.config,
        seed,
        step,
        tensors,
    };
    let path = dir.join(CHECKPOINT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(UnrolledNetParams, CheckpointManifest)> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "unknown checkpoint format {:?}",
            manifest.format
        )));
    }
    let mut params = UnrolledNetParams::zeros(manifest.config)?;
    let expected = params.regs.iter().map(|r| 2 * r.layers.len()).sum::<usize>();
    if manifest.tensors.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors, architecture needs {expected}",
            manifest.tensors.len()
        )));
    }
    for e in &manifest.tensors {
        let layer = params
            .regs
            .get_mut(e.regularizer)
            .and_then(|r| r.layers.get_mut(e.layer))
            .ok_or_else(|| Error::Format(format!("tensor {} is out of range", e.file)))?;
        let slot = match e.kind.as_str() {
            "weight" => &mut layer.weight,
            "bias" => &mut layer.bias,
            other => return Err(Error::Format(format!("unknown tensor kind {other:?}"))),
        };
        let t = melt::read_real(dir.join(&e.file))?;
        if t.shape() != slot.shape() || t.shape() != e.shape.as_slice() {
            return Err(Error::shape(slot.shape(), t.shape()));
        }
        *slot = t;
    }
    Ok((params, manifest))
}
