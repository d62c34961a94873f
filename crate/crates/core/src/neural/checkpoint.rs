//! Single-file checkpoints: one JSON header line, then little-endian `f32`
//! blobs in header order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::{f32_from_le_bytes, f32_to_le_bytes, read_bytes, write_atomic};

const FORMAT: &str = "otrecon-checkpoint";
const VERSION: u32 = 1;

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand_chacha::rand_core::SeedableRng;
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::InvalidValue("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub step: u64,
    pub rng: Option<RngState>,
    /// Free-form record of how to rebuild the networks.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng: Option<RngState>,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Collects every store's parameters under `prefix.name`.
    pub fn from_stores(step: u64, rng: Option<RngState>, meta: serde_json::Value, stores: &[(&str, &ParamStore)]) -> Self {
        let tensors = stores
            .iter()
            .flat_map(|(prefix, s)| s.iter().map(move |(n, t)| (format!("{prefix}.{n}"), t.clone())))
            .collect();
        Checkpoint {
            step,
            rng,
            meta,
            tensors,
        }
    }

    /// Copies tensors named `prefix.*` into matching parameters of `store`.
    pub fn load_into(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let want = format!("{prefix}.");
        let mut seen = 0;
        for (name, t) in &self.tensors {
            if let Some(local) = name.strip_prefix(&want) {
                store.set(local, t.clone())?;
                seen += 1;
            }
        }
        if seen != store.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {seen} tensors for {prefix}, network expects {}",
                store.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format: FORMAT.into(),
            version: VERSION,
            dtype: "f32".into(),
            step: self.step,
            rng: self.rng.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
        out.push(b'\n');
        for (_, t) in &self.tensors {
            let narrow: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
            out.extend(f32_to_le_bytes(&narrow));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::InvalidValue(format!("{}: missing checkpoint header", path.display())))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..split]).map_err(|e| Error::json(path.display().to_string(), e))?;
        if header.format != FORMAT || header.dtype != "f32" {
            return Err(Error::InvalidValue(format!("{}: not an f32 checkpoint", path.display())));
        }
        let values = f32_from_le_bytes(&bytes[split + 1..], path)?;
        let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if values.len() != expected {
            return Err(Error::InvalidValue(format!(
                "{}: header describes {expected} values, file holds {}",
                path.display(),
                values.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = values[offset..offset + n].iter().map(|&v| v as f64).collect();
            offset += n;
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Checkpoint {
            step: header.step,
            rng: header.rng,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?, path)
    }
}
