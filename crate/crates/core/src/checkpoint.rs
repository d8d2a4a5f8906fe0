//! Model checkpoints as safetensors archives.
//!
//! Parameters are stored as little-endian f32 tensors keyed by layer path.
//! The archive metadata carries the architecture (JSON) and training state.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::net::{ArchConfig, CaNet};
use crate::nn::Module;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Mean validation NMSE when the checkpoint was taken, if measured.
    pub val_nmse: Option<f64>,
}

const META_KEY: &str = "fas_canet";

pub fn encode(net: &CaNet<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    net.visit_params("", &mut |name, p| {
        let bytes = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
        blobs.push((name.to_string(), p.shape.clone(), bytes));
    });
    let views = blobs
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Data(format!("tensor {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta).expect("metadata serializes"));
    safetensors::tensor::serialize(views, Some(info)).map_err(|e| Error::Data(format!("checkpoint encode: {e}")))
}

pub fn decode(bytes: &[u8]) -> Result<(CaNet<f32>, CheckpointMeta)> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let meta: CheckpointMeta = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Data("checkpoint carries no architecture metadata".into()))
        .and_then(|s| serde_json::from_str(s).map_err(|e| Error::Data(format!("checkpoint metadata: {e}"))))?;
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| Error::Data(format!("checkpoint body: {e}")))?;
    let mut net = CaNet::<f32>::new(meta.arch.clone(), 0)?;
    let mut err = None;
    let mut seen = 0;
    net.visit_params_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match tensors.tensor(name) {
            Ok(t) if t.dtype() == Dtype::F32 && t.shape() == p.shape.as_slice() => {
                for (dst, chunk) in p.value.iter_mut().zip(t.data().chunks_exact(4)) {
                    *dst = f32::from_le_bytes(chunk.try_into().unwrap());
                }
                seen += 1;
            }
            Ok(_) => err = Some(format!("tensor {name} has the wrong dtype or shape")),
            Err(e) => err = Some(format!("tensor {name}: {e}")),
        }
    });
    if let Some(e) = err {
        return Err(Error::Data(e));
    }
    if seen != tensors.len() {
        return Err(Error::Data(format!("checkpoint holds {} tensors, model uses {seen}", tensors.len())));
    }
    Ok((net, meta))
}

pub fn save(path: &Path, net: &CaNet<f32>, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(net, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CaNet<f32>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_parameters_and_metadata() {
        let arch = ArchConfig::scaled(2, 8, 8, true, 16);
        let net = CaNet::<f32>::new(arch.clone(), 3).unwrap();
        let meta = CheckpointMeta {
            arch,
            step: 12,
            epoch: 1,
            seed: 3,
            config_hash: "abc".into(),
            val_nmse: Some(0.25),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        save(&path, &net, &meta).unwrap();
        let (back, meta2) = load(&path).unwrap();
        assert_eq!(meta, meta2);
        let collect = |m: &CaNet<f32>| {
            let mut v = Vec::new();
            m.visit_params("", &mut |n, p| v.push((n.to_string(), p.value.clone())));
            v
        };
        assert_eq!(collect(&net), collect(&back));
    }

    #[test]
    fn garbage_is_a_data_error() {
        assert!(matches!(decode(b"not a checkpoint"), Err(Error::Data(_))));
    }
}
