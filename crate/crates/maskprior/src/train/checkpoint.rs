//! Versioned binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"MPCK"                     magic, 4 bytes
//! u32 LE                      format version
//! u8                          dtype tag (0 = f32, 1 = f64)
//! u64 LE                      header length in bytes
//! JSON header                 configs, iteration, tensor inventory
//! raw tensor data             little-endian scalars, header order:
//!                             all params, then buffers, then momentum
//! ```
//!
//! Loading verifies the magic, version, dtype, byte counts, and that the
//! tensor inventory matches exactly what the stored model configuration
//! defines — a missing or unexpected tensor is rejected by name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::ParamStore;
use crate::model::{Model, ModelConfig};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    iteration: usize,
    params: Vec<TensorMeta>,
    buffers: Vec<TensorMeta>,
    momentum: Vec<TensorMeta>,
}

/// Full training state: model parameters and buffers, optimizer momentum,
/// the configs that produced them, and the iteration counter.
#[derive(Clone, Debug)]
pub struct Checkpoint<S: Scalar> {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub iteration: usize,
    pub store: ParamStore<S>,
    pub momentum: BTreeMap<String, Tensor<S>>,
}

fn meta_of<'a, S: Scalar + 'a>(it: impl Iterator<Item = (&'a String, &'a Tensor<S>)>) -> Vec<TensorMeta> {
    it.map(|(n, t)| TensorMeta { name: n.clone(), shape: t.shape().to_vec() }).collect()
}

impl<S: Scalar> Checkpoint<S> {
    /// Serialize to bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model_cfg: self.model_cfg.clone(),
            train_cfg: self.train_cfg.clone(),
            iteration: self.iteration,
            params: meta_of(self.store.params()),
            buffers: meta_of(self.store.buffers()),
            momentum: meta_of(self.momentum.iter()),
        };
        let header_json = serde_json::to_vec(&header)?;

        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(S::DTYPE.tag());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, t) in self.store.params() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        for (_, t) in self.store.buffers() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        for t in self.momentum.values() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Consume the checkpoint and rebuild the trained model from its
    /// parameter store.
    pub fn into_model(self) -> Result<Model<S>> {
        let mut model = Model::new(self.model_cfg, 0)?;
        model.params = self.store;
        Ok(model)
    }

    /// Write to `path` (atomically: a temporary file is renamed into place).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Parse from bytes, verifying format, dtype, and tensor inventory.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 17 {
            return Err(fail("file too short to be a checkpoint".into()));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic: not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!(
                "unsupported format version {version} (this build reads version {CHECKPOINT_VERSION})"
            )));
        }
        let tag = bytes[8];
        let dtype = Dtype::from_tag(tag).ok_or_else(|| fail(format!("unknown dtype tag {tag}")))?;
        if dtype != S::DTYPE {
            return Err(fail(format!("dtype mismatch: file holds {dtype:?}, loader expects {:?}", S::DTYPE)));
        }
        let header_len = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
        let data_start = 17 + header_len;
        if bytes.len() < data_start {
            return Err(fail("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[17..data_start])?;

        let scalars: usize = header
            .params
            .iter()
            .chain(&header.buffers)
            .chain(&header.momentum)
            .map(|m| m.shape.iter().product::<usize>())
            .sum();
        let expect = data_start + scalars * S::BYTE_WIDTH;
        if bytes.len() != expect {
            return Err(fail(format!(
                "data section holds {} bytes, header promises {}",
                bytes.len() - data_start,
                scalars * S::BYTE_WIDTH
            )));
        }

        let mut off = data_start;
        let mut read_tensor = |m: &TensorMeta| -> Tensor<S> {
            let n: usize = m.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(S::read_le(&bytes[off..]));
                off += S::BYTE_WIDTH;
            }
            Tensor::from_vec(&m.shape, data)
        };

        let mut store = ParamStore::new();
        for m in &header.params {
            store.insert_param(&m.name, read_tensor(m));
        }
        for m in &header.buffers {
            store.insert_buffer(&m.name, read_tensor(m));
        }
        let mut momentum = BTreeMap::new();
        for m in &header.momentum {
            momentum.insert(m.name.clone(), read_tensor(m));
        }

        let ck = Checkpoint {
            model_cfg: header.model_cfg,
            train_cfg: header.train_cfg,
            iteration: header.iteration,
            store,
            momentum,
        };
        ck.verify_inventory()?;
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// The stored tensors must be exactly the ones the model configuration
    /// defines — same names, same shapes — and momentum must cover exactly
    /// the trainable parameters.
    fn verify_inventory(&self) -> Result<()> {
        let reference = Model::<S>::new(self.model_cfg.clone(), 0)?;
        for (name, t) in reference.params.params() {
            if !self.store.has_param(name) {
                return Err(Error::Checkpoint(format!("missing parameter key: {name}")));
            }
            if self.store.param(name).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    self.store.param(name).shape(),
                    t.shape()
                )));
            }
            if !self.momentum.contains_key(name) {
                return Err(Error::Checkpoint(format!("missing momentum key: {name}")));
            }
        }
        if self.store.num_params() != reference.params.num_params() {
            let extra = self
                .store
                .params()
                .find(|(n, _)| !reference.params.has_param(n))
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!("unexpected parameter key: {extra}")));
        }
        let ref_buffers: Vec<&String> = reference.params.buffers().map(|(n, _)| n).collect();
        let got_buffers: Vec<&String> = self.store.buffers().map(|(n, _)| n).collect();
        if ref_buffers != got_buffers {
            return Err(Error::Checkpoint(format!(
                "buffer inventory mismatch: file has {got_buffers:?}, model defines {ref_buffers:?}"
            )));
        }
        if self.momentum.len() != self.store.num_params() {
            let extra = self
                .momentum
                .keys()
                .find(|n| !self.store.has_param(n))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!("unexpected momentum key: {extra}")));
        }
        Ok(())
    }
}
