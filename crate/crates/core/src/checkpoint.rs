//! JSON checkpoints. Floats are written with round-trip precision, so a
//! reloaded model reproduces losses bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::flowgen::{MlpShape, SamplerConfig, VelocityField};
use crate::sft::{TinyLM, Vocab};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "rolekit-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LmRecord {
    vocab: Vocab,
    dim: usize,
    params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    shape: MlpShape,
    params: Vec<f64>,
    sampler: SamplerConfig,
    lm: Option<LmRecord>,
}

/// A velocity field with its sampler defaults and, optionally, the text model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub velocity: VelocityField,
    pub sampler: SamplerConfig,
    pub lm: Option<TinyLM>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            shape: *self.velocity.shape(),
            params: self.velocity.params().to_vec(),
            sampler: self.sampler,
            lm: self.lm.as_ref().map(|lm| LmRecord {
                vocab: lm.vocab().clone(),
                dim: lm.dim(),
                params: lm.params().to_vec(),
            }),
        };
        let bytes = serde_json::to_vec(&file)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile =
            serde_json::from_slice(&bytes).map_err(|source| Error::Parse { path: path.to_path_buf(), source })?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::schema("format", format!("expected `{CHECKPOINT_FORMAT}`, found `{}`", file.format)));
        }
        file.shape.validate()?;
        let velocity = VelocityField::from_params(file.shape, file.params)?;
        let lm = file.lm.map(|r| TinyLM::from_params(r.vocab, r.dim, r.params)).transpose()?;
        Ok(Self { velocity, sampler: file.sampler, lm })
    }
}
