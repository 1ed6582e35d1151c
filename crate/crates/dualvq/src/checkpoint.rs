//! Self-describing checkpoint container.
//!
//! Layout: an 8-byte magic+version tag, a little-endian `u32` header
//! length, a JSON header (model config, step count, RNG state, and the
//! parameter directory), then the raw parameter blobs as little-endian
//! `f64` in directory order. Reload reproduces bit-identical tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelConfig, ModelError};
use crate::numerics::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"DVQCKPT\x01";
const MAX_HEADER: usize = 4 << 20;
const MAX_ELEMS_PER_PARAM: usize = 1 << 24;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: {0}")]
    BadMagic(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    rng_seed: u64,
    rng_word_pos: u128,
    params: Vec<BlobInfo>,
}

#[derive(Serialize, Deserialize)]
struct BlobInfo {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

/// A trained (or initialized) model state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, rng_seed: u64, rng_word_pos: u128) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            step,
            rng_seed,
            rng_word_pos,
        }
    }

    pub fn model(&self) -> Result<Model, ModelError> {
        Model::from_parts(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng_word_pos,
            params: self
                .params
                .iter()
                .map(|e| BlobInfo {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    frozen: e.frozen,
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header_json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for e in self.params.iter() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 {
            return Err(CheckpointError::BadMagic("file too short"));
        }
        if &bytes[0..8] != MAGIC {
            return Err(CheckpointError::BadMagic("wrong magic or version"));
        }
        let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        if header_len > MAX_HEADER {
            return Err(CheckpointError::Malformed(format!(
                "header length {header_len} exceeds cap"
            )));
        }
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CheckpointError::Malformed("header extends past file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| CheckpointError::Malformed(format!("header json: {e}")))?;
        header.config.validate()?;

        let mut params = ParamSet::new();
        let mut offset = header_end;
        for info in &header.params {
            let mut numel = 1usize;
            for &d in &info.shape {
                if d == 0 {
                    return Err(CheckpointError::Malformed(format!(
                        "parameter `{}` has a zero dimension",
                        info.name
                    )));
                }
                numel = numel
                    .checked_mul(d)
                    .filter(|&n| n <= MAX_ELEMS_PER_PARAM)
                    .ok_or_else(|| {
                        CheckpointError::Malformed(format!(
                            "parameter `{}` is implausibly large",
                            info.name
                        ))
                    })?;
            }
            let nbytes = numel * 8;
            let end = offset
                .checked_add(nbytes)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| {
                    CheckpointError::Malformed(format!(
                        "parameter `{}` blob extends past file",
                        info.name
                    ))
                })?;
            let mut data = Vec::with_capacity(numel);
            for chunk in bytes[offset..end].chunks_exact(8) {
                let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
                if !v.is_finite() {
                    return Err(CheckpointError::Malformed(format!(
                        "parameter `{}` contains a non-finite value",
                        info.name
                    )));
                }
                data.push(v);
            }
            offset = end;
            let tensor = Tensor::new(info.shape.clone(), data)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let idx = params.push(info.name.clone(), tensor);
            params.set_frozen(idx, info.frozen);
        }
        if offset != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after parameter blobs",
                bytes.len() - offset
            )));
        }
        Ok(Self {
            config: header.config,
            params,
            step: header.step,
            rng_seed: header.rng_seed,
            rng_word_pos: header.rng_word_pos,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn small_model() -> Model {
        let config = ModelConfig {
            dsf: 16,
            local_k: 8,
            global_k: 4,
            embed_d: 4,
            n_speakers: 3,
            hidden: 4,
            variant: Variant::GlobalVq,
            ..ModelConfig::default()
        };
        Model::new(config, 9).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let model = small_model();
        let ckpt = Checkpoint::from_model(&model, 42, 7, 123456789);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.rng_seed, 7);
        assert_eq!(back.rng_word_pos, 123456789);
        assert_eq!(back.params, ckpt.params);

        // bit-identical forward outputs
        let audio = crate::wav::AudioSignal::new(vec![0.1; 64], 16000);
        let a = model.local_codes(&audio).unwrap();
        let b = back.model().unwrap().local_codes(&audio).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_and_corrupt_inputs_are_rejected() {
        let model = small_model();
        let bytes = Checkpoint::from_model(&model, 0, 0, 0).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..5]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong_magic).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing).is_err());
        let mut huge_header = bytes;
        huge_header[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&huge_header).is_err());
    }
}
