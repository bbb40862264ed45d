//! Tensor archives in the safetensors format with string metadata.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::params::ParamStore;

/// Contents of an archive.
#[derive(Debug, Default)]
pub struct Archive {
    pub metadata: HashMap<String, String>,
    pub tensors: HashMap<String, Tensor>,
}

impl Archive {
    /// Adds every tensor of `store` under `prefix/`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Fills a store laid out like `like` from tensors under `prefix/`.
    pub fn take_store(&self, prefix: &str, like: &ParamStore) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (name, t) in like.iter() {
            let key = format!("{prefix}/{name}");
            let stored = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {}, expected {}",
                    stored.shape(),
                    t.shape()
                )));
            }
            out.insert(name.to_string(), stored.clone());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let data = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), data, t.dims().to_vec())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, data, shape)| {
                TensorView::new(Dtype::F64, shape.clone(), data)
                    .map(|v| (name.as_str(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = Some(self.metadata.clone());
        let encoded = safetensors::serialize(views, meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, encoded).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
        let archive = SafeTensors::deserialize(&bytes).map_err(bad)?;
        let mut tensors = HashMap::new();
        for (name, view) in archive.tensors() {
            if view.dtype() != Dtype::F64 || view.shape().len() != 4 {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} must be a 4-d f64 array, found {:?} {:?}",
                    view.dtype(),
                    view.shape()
                )));
            }
            let s = view.shape();
            let data = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, Tensor::from_vec(Shape::new(s[0], s[1], s[2], s[3]), data)?);
        }
        Ok(Self {
            metadata: meta.metadata().clone().unwrap_or_default(),
            tensors,
        })
    }
}
