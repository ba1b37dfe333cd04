//! JSON checkpoints. Tensors are stored as base64 of their little-endian
//! `f32` bytes, so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

use super::config::ModelConfig;
use super::model::Model;
use super::train::{Sgd, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl EncodedTensor {
    pub fn encode(t: &Tensor<f32>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * f32::BYTES);
        t.data().iter().for_each(|&v| v.write_le(&mut bytes));
        Self {
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor<f32>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Config(format!("checkpoint tensor: {e}")))?;
        if bytes.len() % f32::BYTES != 0 {
            return Err(Error::Config("checkpoint tensor has a partial element".into()));
        }
        let data = bytes.chunks(f32::BYTES).map(f32::read_le).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

fn encode_map(m: &BTreeMap<String, Tensor<f32>>) -> BTreeMap<String, EncodedTensor> {
    m.iter().map(|(k, v)| (k.clone(), EncodedTensor::encode(v))).collect()
}

fn decode_map(m: &BTreeMap<String, EncodedTensor>) -> Result<BTreeMap<String, Tensor<f32>>> {
    m.iter().map(|(k, v)| Ok((k.clone(), v.decode()?))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub params: BTreeMap<String, EncodedTensor>,
    pub buffers: BTreeMap<String, EncodedTensor>,
    pub momentum: BTreeMap<String, EncodedTensor>,
    /// Class names in label order, when known.
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, class_names: &[String]) -> Self {
        Self {
            model: t.model.config.clone(),
            train: t.config.clone(),
            epoch: t.epoch,
            params: encode_map(&t.model.store.params),
            buffers: encode_map(&t.model.store.buffers),
            momentum: encode_map(&t.sgd.velocity),
            class_names: class_names.to_vec(),
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        let store = ParamStore {
            params: decode_map(&self.params)?,
            buffers: decode_map(&self.buffers)?,
        };
        Model::from_store(self.model.clone(), store)
    }

    pub fn trainer(&self) -> Result<Trainer> {
        let mut t = Trainer::new(self.model()?, self.train.clone())?;
        t.sgd = Sgd {
            velocity: decode_map(&self.momentum)?,
            ..t.sgd
        };
        t.epoch = self.epoch;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
