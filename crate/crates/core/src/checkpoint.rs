//! Binary checkpoints: a JSON header followed by raw little-endian tensors.
//!
//! Layout:
//!
//! ```text
//! b"BONETCKP"            8-byte magic
//! u64 (LE)               header length in bytes
//! header                 UTF-8 JSON: version, configs, progress, history, tensor table
//! payload                f64 (LE): parameters, then Adam first moments, then second moments
//! ```
//!
//! Tensors are stored bit for bit, so save/load/save reproduces the file
//! exactly and a resumed run continues identically.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::training::{EpochRecord, OptimizerState, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"BONETCKP";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    step: u64,
    lr: f64,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to run inference or resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Next epoch to run.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub params: Vec<(String, Array2<f64>)>,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            model_config: t.model().config().clone(),
            train_config: t.config().clone(),
            epoch: t.epoch(),
            history: t.history().to_vec(),
            params: t
                .model()
                .params()
                .iter()
                .map(|(n, v)| (n.to_string(), v.clone()))
                .collect(),
            optimizer: t.optimizer().clone(),
        }
    }

    /// Rebuilds the model and loads the stored parameters into it.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_config.clone())?;
        model.params_mut().load_from(&self.params)?;
        Ok(model)
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        self.train_config.validate()?;
        let model = self.model()?;
        let expected: Vec<_> = model.params().iter().map(|(_, v)| v.dim()).collect();
        let moments_ok = |m: &[Array2<f64>]| {
            m.len() == expected.len() && m.iter().zip(&expected).all(|(a, &d)| a.dim() == d)
        };
        if !moments_ok(&self.optimizer.m) || !moments_ok(&self.optimizer.v) {
            return Err(Error::ConfigMismatch("optimizer moments do not match parameters".into()));
        }
        Ok(Trainer {
            model,
            config: self.train_config,
            optimizer: self.optimizer,
            epoch: self.epoch,
            history: self.history,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.params.len();
        if self.optimizer.m.len() != n || self.optimizer.v.len() != n {
            return Err(Error::ConfigMismatch("optimizer moments do not match parameters".into()));
        }
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            step: self.optimizer.step,
            lr: self.optimizer.lr,
            history: self.history.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, v)| TensorEntry {
                    name: name.clone(),
                    shape: [v.nrows(), v.ncols()],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::config("checkpoint", e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 24 * self.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self
            .params
            .iter()
            .map(|(_, v)| v)
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v);
        for t in tensors {
            // Iteration is in logical row-major order regardless of memory layout.
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            message,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(parse_err("not a checkpoint file (bad magic)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if header_len > body.len() {
            return Err(parse_err(format!(
                "truncated header: {header_len} bytes declared, {} available",
                body.len()
            )));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| parse_err(format!("header line {} column {}: {e}", e.line(), e.column())))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: header.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let payload = &body[header_len..];
        let scalars: usize = header.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
        if payload.len() != 3 * scalars * 8 {
            return Err(parse_err(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                3 * scalars * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |shape: [usize; 2]| -> Array2<f64> {
            let data: Vec<f64> = values.by_ref().take(shape[0] * shape[1]).collect();
            Array2::from_shape_vec((shape[0], shape[1]), data).expect("length checked above")
        };
        let params: Vec<(String, Array2<f64>)> =
            header.tensors.iter().map(|t| (t.name.clone(), take(t.shape))).collect();
        let m = header.tensors.iter().map(|t| take(t.shape)).collect();
        let v = header.tensors.iter().map(|t| take(t.shape)).collect();
        Ok(Self {
            model_config: header.model_config,
            train_config: header.train_config,
            epoch: header.epoch,
            history: header.history,
            params,
            optimizer: OptimizerState {
                m,
                v,
                step: header.step,
                lr: header.lr,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, v)| v.len()).sum()
    }
}
