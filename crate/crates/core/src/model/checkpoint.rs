//! Checkpoint file: `u64` little-endian header length, a JSON header, then
//! every tensor as little-endian `f32` at the offset recorded in the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{FreezeMask, ModelParams, ParamKind, ParamTensor};
use super::Model;
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub freeze: FreezeMask,
    /// Free-form stage tag such as `init`, `stage1`, `stage2`.
    pub stage: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: ParamKind,
    shape: [usize; 2],
    /// Byte offset into the blob section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    freeze: Vec<bool>,
    stage: String,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .model
            .params
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    kind: t.kind,
                    shape: [t.value.rows, t.value.cols],
                    offset,
                };
                offset += t.value.data.len() * 4;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.model.config.clone(),
            freeze: self.freeze.trainable.clone(),
            stage: self.stage.clone(),
            seed: self.seed,
            tensors,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.model.params.tensors {
            for &v in &t.value.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::InvalidInput(format!("corrupt checkpoint: {m}"));
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| corrupt("truncated"))?.try_into().expect("8 bytes");
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let header_end = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("header"))?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
        let blob = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.shape[0] * e.shape[1];
            let raw = blob.get(e.offset..e.offset + n * 4).ok_or_else(|| corrupt(&e.name))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push(ParamTensor { name: e.name, kind: e.kind, value: Mat::from_vec(e.shape[0], e.shape[1], data)? });
        }
        header.config.validate()?;
        let params = ModelParams { tensors };
        let expected = ModelParams::init(&ModelConfig { seed: 0, ..header.config.clone() });
        let shapes_ok = params.tensors.len() == expected.tensors.len()
            && params.tensors.iter().zip(&expected.tensors).all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !shapes_ok || header.freeze.len() != params.tensors.len() {
            return Err(Error::Shape("checkpoint tensors do not match its config".into()));
        }
        Ok(Self {
            model: Model { config: header.config, params },
            freeze: FreezeMask { trainable: header.freeze },
            stage: header.stage,
            seed: header.seed,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let cfg = ModelConfig { vocab_size: 12, d_model: 8, n_heads: 2, n_layers: 2, d_ff: 16, page_size: 4, seed: 5, ..Default::default() };
        let model = Model::init(cfg).unwrap();
        let ck = Checkpoint { freeze: FreezeMask::stage1(&model.params), model, stage: "stage1".into(), seed: 5 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        let bytes = fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["stage"], "stage1");
        assert_eq!(header["tensors"][0]["name"], "tok_embedding");
        assert_eq!(header["tensors"][0]["offset"], 0);
        assert_eq!(header["tensors"][1]["offset"], 11 * 8 * 4);
    }

    #[test]
    fn truncated_file_is_rejected() {
        assert!(Checkpoint::from_bytes(&[1, 2, 3]).is_err());
        assert!(Checkpoint::from_bytes(&[255, 0, 0, 0, 0, 0, 0, 0, b'{']).is_err());
    }
}
