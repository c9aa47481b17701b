//! JSON checkpoint of a model: config, vocabulary size and every parameter as
//! a named array with its shape.
//!
//! ```json
//! {
//!   "format": "c3rec-checkpoint",
//!   "version": 1,
//!   "config": { "dim": 64, "kernel_size": 3, ... },
//!   "num_items": 3883,
//!   "params": [ { "name": "item_embedding", "shape": [3884, 64], "data": [...] }, ... ]
//! }
//! ```
//!
//! Parameters appear in construction order. Floats are written in shortest
//! round-trip form, so save → load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{C3Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "c3rec-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub num_items: usize,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model(model: &C3Model) -> Self {
        let params = model
            .store()
            .iter()
            .map(|(_, name, t)| NamedArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            num_items: model.num_items(),
            params,
        }
    }

    pub fn into_model(self) -> Result<C3Model> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = C3Model::new(self.config, self.num_items, 0)?;
        if model.store().len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.store().len()
            )));
        }
        for array in self.params {
            let id = model
                .store()
                .by_name(&array.name)
                .ok_or_else(|| Error::Data(format!("unexpected parameter `{}`", array.name)))?;
            let target = model.store_mut().get_mut(id);
            if target.shape() != array.shape.as_slice() || array.data.len() != target.numel() {
                return Err(Error::Data(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    array.name,
                    array.shape,
                    target.shape()
                )));
            }
            target.data_mut().copy_from_slice(&array.data);
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl C3Model {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::from_model(self).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::load(path)?.into_model()
    }
}
