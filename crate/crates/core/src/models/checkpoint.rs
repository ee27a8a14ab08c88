//! Checkpoint files.
//!
//! Layout: the 8-byte magic `AUSPCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header
//! ([`CheckpointHeader`]), then every parameter's values as little-endian
//! `f32` in header order.

use std::fs;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::params::ParamGroup;
use super::KnowledgeSpreader;
use crate::config::ModelConfig;
use crate::domain::RunState;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AUSPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub state: RunState,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, model: &KnowledgeSpreader, state: &RunState) -> Result<()> {
    let store = model.params();
    let header = CheckpointHeader {
        model: model.config().clone(),
        state: state.clone(),
        tensors: store
            .params()
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), group: p.group, shape: p.var.dims().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(20 + json.len() + store.num_parameters() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in store.params() {
        let values = p.var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // Write then rename so an interrupted save never leaves a truncated file.
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Restores a model (as `f32`) and the run state saved with it.
pub fn load(path: &Path) -> Result<(KnowledgeSpreader, RunState)> {
    let fail = |reason: &str| Error::Checkpoint { path: path.to_path_buf(), reason: reason.to_string() };
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(&format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + header_len).ok_or_else(|| fail("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let model = KnowledgeSpreader::new(&header.model, 0, DType::F32)?;
    let store = model.params();
    if header.tensors.len() != store.params().len() {
        return Err(fail("parameter list does not match the model configuration"));
    }
    let mut offset = 20 + header_len;
    for (i, (entry, param)) in header.tensors.iter().zip(store.params()).enumerate() {
        if entry.name != param.name || entry.shape != param.var.dims() {
            return Err(fail(&format!("parameter `{}` does not match the model", entry.name)));
        }
        let count: usize = entry.shape.iter().product();
        let raw = bytes.get(offset..offset + count * 4).ok_or_else(|| fail("truncated parameter data"))?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.set_values(i, &values)?;
        offset += count * 4;
    }
    if offset != bytes.len() {
        return Err(fail("trailing bytes after parameter data"));
    }
    Ok((model, header.state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_restores_parameters_and_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("epoch_1.ckpt");
        let model = KnowledgeSpreader::new(&ModelConfig::default(), 11, DType::F32).unwrap();
        let state = RunState { epoch: 1, batch_counter: 48, rng_seed: 11, positive_weights: vec![1.0, 2.5, 0.1, 10.0, 3.0] };
        save(&path, &model, &state).unwrap();
        let (back, back_state) = load(&path).unwrap();
        assert_eq!(back_state, state);
        assert_eq!(back.config(), model.config());
        for i in 0..model.params().params().len() {
            assert_eq!(back.params().values(i).unwrap(), model.params().values(i).unwrap());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint { .. })));
        let model = KnowledgeSpreader::new(&ModelConfig::default(), 0, DType::F32).unwrap();
        save(&path, &model, &RunState::default()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint { .. })));
    }
}
