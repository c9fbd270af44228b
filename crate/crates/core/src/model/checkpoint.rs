use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TimeFormer};
use crate::container;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"MOSACKPT";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    config: ModelConfig,
    seed: u64,
    normalization: Option<NormStats>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// A model plus the data normalization it was trained under.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TimeFormer,
    pub normalization: Option<NormStats>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = self.model.params();
        let mut tensors = Vec::with_capacity(store.len());
        let mut payload = Vec::new();
        for (_, p) in store.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.tensor.requires_grad,
            });
            payload.extend_from_slice(p.tensor.data());
        }
        let header = Header {
            format: "timeformer-checkpoint".into(),
            config: self.model.config().clone(),
            seed: self.model.seed(),
            normalization: self.normalization.clone(),
            tensors,
        };
        container::encode(MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (Header, Vec<f64>) = container::decode(bytes, MAGIC)?;
        Self::assemble(header, payload)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload): (Header, Vec<f64>) = container::read(path, MAGIC)?;
        Self::assemble(header, payload)
    }

    fn assemble(header: Header, payload: Vec<f64>) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut offset = 0;
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let data = payload
                .get(offset..offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("payload too short for {}", entry.name)))?
                .to_vec();
            offset += n;
            let mut t = Tensor::new(&entry.shape, data)?;
            t.requires_grad = entry.trainable;
            store.add(entry.name, t);
        }
        if offset != payload.len() {
            return Err(Error::Checkpoint("payload has trailing values".into()));
        }
        let model = TimeFormer::from_parts(header.config, header.seed, store)
            .map_err(|e| Error::Checkpoint(format!("checkpoint does not match its config: {e}")))?;
        Ok(Self {
            model,
            normalization: header.normalization,
        })
    }
}
