//! Named f32 tensor archives (safetensors) with string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::ArrayD;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct Archive {
    pub tensors: BTreeMap<String, ArrayD<f32>>,
    pub metadata: HashMap<String, String>,
}

impl Archive {
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f32>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::format("archive", format!("missing tensor {name:?}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format("archive", format!("missing metadata key {key:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(&String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let raw: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                (k, raw, v.shape().to_vec())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(k, raw, shape)| {
                TensorView::new(Dtype::F32, shape.clone(), raw)
                    .map(|view| (k.as_str(), view))
                    .map_err(|e| Error::format("archive", e))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = (!self.metadata.is_empty()).then(|| self.metadata.clone());
        safetensors::serialize(views, meta).map_err(|e| Error::format("archive", e))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(buf).map_err(|e| Error::format("archive", e))?;
        let (_, header) = SafeTensors::read_metadata(buf).map_err(|e| Error::format("archive", e))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::format("archive", format!("tensor {name:?} is {:?}, expected F32", view.dtype())));
            }
            let data: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(view.shape().to_vec(), data).map_err(|e| Error::format("archive", e))?;
            tensors.insert(name, arr);
        }
        Ok(Self { tensors, metadata: header.metadata().clone().unwrap_or_default() })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so readers never observe a partial file.
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
