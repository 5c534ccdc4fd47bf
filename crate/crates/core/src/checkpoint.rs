//! Binary parameter checkpoints.
//!
//! Layout: the 8-byte magic `LGDCKPT1`, the manifest length as a
//! little-endian u64, the JSON manifest, then every tensor's data as
//! little-endian f64 in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{DataMeta, EncoderConfig, TrainingConfig};
use crate::diffusion::{DiffusionConfig, NodeCountSampler};
use crate::error::{LgdError, Result};
use crate::nn::DenoiserConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LGDCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Model {
    Autoencoder {
        encoder: EncoderConfig,
        meta: DataMeta,
    },
    Denoiser {
        denoiser: DenoiserConfig,
        diffusion: DiffusionConfig,
        node_counts: NodeCountSampler,
        /// Content hash of the autoencoder checkpoint the latents came from.
        autoencoder_hash: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: Model,
    pub training: TrainingConfig,
    pub optimizer: String,
    pub precision: u32,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
}

fn malformed(msg: impl Into<String>) -> LgdError {
    LgdError::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Builds the manifest's tensor table from `params`.
    pub fn new(
        model: Model,
        training: TrainingConfig,
        precision: u32,
        seed: u64,
        params: ParamStore,
    ) -> Self {
        let tensors = params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                rows: t.rows,
                cols: t.cols,
            })
            .collect();
        Checkpoint {
            manifest: Manifest {
                model,
                training,
                optimizer: "adam".into(),
                precision,
                seed,
                tensors,
            },
            params,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(16 + manifest.len() + self.params.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (entry, (name, t)) in self.manifest.tensors.iter().zip(self.params.iter()) {
            if entry.name != name || entry.rows != t.rows || entry.cols != t.cols {
                return Err(malformed(format!(
                    "manifest entry {} does not match the parameters",
                    entry.name
                )));
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if self.manifest.tensors.len() != self.params.len() {
            return Err(malformed("manifest and parameter counts differ"));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(malformed("missing checkpoint magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = &bytes[16..];
        let len = usize::try_from(len)
            .ok()
            .filter(|&l| l <= rest.len())
            .ok_or_else(|| malformed("manifest length exceeds the file"))?;
        let manifest: Manifest = serde_json::from_slice(&rest[..len])
            .map_err(|e| malformed(format!("manifest: {e}")))?;
        let mut data = &rest[len..];
        let mut params = ParamStore::new();
        for entry in &manifest.tensors {
            let count = entry
                .rows
                .checked_mul(entry.cols)
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= data.len()))
                .ok_or_else(|| malformed(format!("tensor {} is truncated", entry.name)))?;
            if params.get(&entry.name).is_some() {
                return Err(malformed(format!("duplicate tensor {}", entry.name)));
            }
            let (head, tail) = data.split_at(count * 8);
            let values = head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(
                entry.name.clone(),
                Tensor::from_vec(entry.rows, entry.cols, values)?,
            );
            data = tail;
        }
        if !data.is_empty() {
            return Err(malformed(format!("{} trailing bytes", data.len())));
        }
        Ok(Checkpoint { manifest, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.encode()?;
        std::fs::write(path, &bytes)?;
        Ok(content_hash(&bytes))
    }

    /// Returns the checkpoint and the content hash of its bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<(Checkpoint, String)> {
        let path = path.as_ref();
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(LgdError::CheckpointNotFound(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        Ok((Checkpoint::decode(&bytes)?, content_hash(&bytes)))
    }
}

/// SHA-256 over `blob <len>\0` followed by the content, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}
