//! Binary checkpoint container.
//!
//! Layout: `u64` little-endian manifest length, the JSON manifest, then one
//! little-endian `f32` blob per parameter in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Parameter values in file order.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Highest training stage completed.
    pub stage: u32,
    /// Free-form run metadata (model kind, resolved config, ...).
    pub meta: serde_json::Value,
    pub params: Vec<TensorEntry>,
}

pub fn write_checkpoint(mut w: impl Write, store: &ParamStore<f32>, stage: u32, meta: serde_json::Value) -> Result<()> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage,
        meta,
        params: store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, p) in store.iter() {
        let mut buf = Vec::with_capacity(p.value.len() * 4);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(Manifest, NamedTensors)> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(Error::Format(format!("manifest length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        if e.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype `{}`", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
    }
    Ok((manifest, tensors))
}

pub fn save(path: &Path, store: &ParamStore<f32>, stage: u32, meta: serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, store, stage, meta)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Manifest, NamedTensors)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

/// Copies checkpointed values into `store`; every store parameter must be present
/// with a matching shape.
pub fn restore(store: &mut ParamStore<f32>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let src = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
        let id = store.id(&name).expect("name from store");
        let dst = store.value_mut(id);
        if dst.shape() != src.1.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}` has shape {:?} in the checkpoint, {:?} in the model",
                src.1.shape(),
                dst.shape()
            )));
        }
        *dst = src.1.clone();
    }
    Ok(())
}
