//! Checkpoint files: JSON document with base64 little-endian tensor payloads.
//!
//! ```text
//! {
//!   "format": "esd-checkpoint", "version": 1, "dtype": "f32",
//!   "role": "STUDENT", "extractor_spec": {..}, "head_spec": {..},
//!   "frozen": ["EXTRACTOR"],
//!   "provenance": {"stage": "FROZEN", "seed": 0, "config_digest": "..", "method": "SD"},
//!   "checksum": "<sha256 of all tensors>",
//!   "tensors": [{"key": "..", "label": "HEAD", "trainable": true, "shape": [..], "data": "<base64>"}]
//! }
//! ```

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::arch::ArchitectureSpec;
use super::network::{NetworkPartition, Role};
use super::weights::{ModelWeights, PartitionLabel, WeightEntry};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const FORMAT: &str = "esd-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    /// Last completed stage (`DISTILL`, `FROZEN`, `FINETUNE`, `NORMAL`, `PRETRAIN`, ...).
    pub stage: String,
    pub seed: u64,
    pub config_digest: String,
    #[serde(default)]
    pub method: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    key: String,
    label: PartitionLabel,
    trainable: bool,
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    dtype: String,
    role: Role,
    extractor_spec: ArchitectureSpec,
    head_spec: ArchitectureSpec,
    frozen: Vec<PartitionLabel>,
    provenance: Provenance,
    checksum: String,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub role: Role,
    pub extractor_spec: ArchitectureSpec,
    pub head_spec: ArchitectureSpec,
    pub frozen: Vec<PartitionLabel>,
    pub provenance: Provenance,
    pub weights: ModelWeights<T>,
}

fn decode<T: Scalar>(dtype: &str, b64: &str, key: &str) -> Result<Vec<T>> {
    let bytes = STANDARD
        .decode(b64)
        .map_err(|e| Error::Checkpoint(format!("{key}: bad base64: {e}")))?;
    match dtype {
        "f32" => Ok(bytes.chunks_exact(4).map(|c| T::lit(f32::from_le_slice(c) as f64)).collect()),
        "f64" => Ok(bytes.chunks_exact(8).map(|c| T::lit(f64::from_le_slice(c))).collect()),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_network(net: &NetworkPartition<T>, provenance: Provenance) -> Self {
        Self {
            role: net.role(),
            extractor_spec: net.extractor_spec().clone(),
            head_spec: net.head_spec().clone(),
            frozen: net.frozen_labels(),
            provenance,
            weights: net.weights(),
        }
    }

    /// Rebuilds the network, restoring weights and freeze flags.
    pub fn to_network(&self) -> Result<NetworkPartition<T>> {
        let mut net = NetworkPartition::random(self.role, &self.extractor_spec, &self.head_spec, 0)?;
        net.load_weights(&self.weights)?;
        for &l in &self.frozen {
            net.freeze(l);
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tensors = self
            .weights
            .entries()
            .map(|(k, e)| {
                let mut buf = Vec::with_capacity(e.data.len() * std::mem::size_of::<T>());
                for &v in &e.data {
                    v.extend_le_bytes(&mut buf);
                }
                TensorRecord {
                    key: k.clone(),
                    label: e.label,
                    trainable: e.trainable,
                    shape: e.shape.clone(),
                    data: STANDARD.encode(&buf),
                }
            })
            .collect();
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            dtype: T::DTYPE.into(),
            role: self.role,
            extractor_spec: self.extractor_spec.clone(),
            head_spec: self.head_spec.clone(),
            frozen: self.frozen.clone(),
            provenance: self.provenance.clone(),
            checksum: self.weights.checksum(),
            tensors,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let json = serde_json::to_vec(&file)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, converting dtype if needed. The stored checksum is
    /// verified whenever the dtype matches.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_slice(&bytes)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: not an {FORMAT} v{VERSION} file",
                path.display()
            )));
        }
        let mut weights = ModelWeights::new();
        for t in file.tensors {
            let data = decode::<T>(&file.dtype, &t.data, &t.key)?;
            if data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("{}: payload does not match shape", t.key)));
            }
            weights.insert(
                t.key,
                WeightEntry {
                    shape: t.shape,
                    data,
                    label: t.label,
                    trainable: t.trainable,
                },
            );
        }
        if file.dtype == T::DTYPE && weights.checksum() != file.checksum {
            return Err(Error::Checkpoint(format!("{}: checksum mismatch", path.display())));
        }
        Ok(Self {
            role: file.role,
            extractor_spec: file.extractor_spec,
            head_spec: file.head_spec,
            frozen: file.frozen,
            provenance: file.provenance,
            weights,
        })
    }
}
