//! Binary checkpoints: magic, little-endian header length, JSON manifest,
//! then raw little-endian f64 blobs in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LDCKPT1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 elements from the start of the blob section.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    /// `(name, shape, values)` in file order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config_hash: &str) -> Checkpoint {
        Checkpoint {
            config_hash: config_hash.to_string(),
            tensors: model
                .named_parameters()
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec(), t.to_vec()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.tensors.iter().find(|t| t.0 == name).map(|t| t.2.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = Entry { name: name.clone(), shape: shape.clone(), offset };
                offset += data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Manifest { config_hash: self.config_hash.clone(), tensors })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let end = hlen.checked_add(16).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header = &bytes[16..end];
        let manifest: Manifest = serde_json::from_slice(header)?;
        let blob = &bytes[end..];
        if !blob.len().is_multiple_of(8) {
            return Err(bad("blob section is not a whole number of f64"));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = e
                .offset
                .checked_add(n)
                .and_then(|stop| values.get(e.offset..stop))
                .ok_or_else(|| bad(&format!("tensor {} out of range", e.name)))?
                .to_vec();
            tensors.push((e.name, e.shape, data));
        }
        Ok(Checkpoint { config_hash: manifest.config_hash, tensors })
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, config_hash: &str) -> Result<()> {
    fs::write(path, Checkpoint::from_model(model, config_hash).to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

impl Model {
    /// Copies every parameter from `ckpt` into this model. When
    /// `expected_hash` is given it must match the checkpoint's.
    pub fn restore(&self, ckpt: &Checkpoint, expected_hash: Option<&str>) -> Result<()> {
        if let Some(h) = expected_hash {
            if h != ckpt.config_hash {
                return Err(Error::Checkpoint(format!(
                    "config hash mismatch: expected {h}, found {}",
                    ckpt.config_hash
                )));
            }
        }
        let params = self.named_parameters();
        for (name, t) in &params {
            let (_, shape, _) = ckpt
                .tensors
                .iter()
                .find(|e| &e.0 == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {shape:?} vs {:?}",
                    t.shape()
                )));
            }
        }
        for (name, t) in params {
            t.data_mut().copy_from_slice(ckpt.get(&name).unwrap());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn bytes_round_trip_bit_exact() {
        let m = Model::new(ModelConfig::default(), 5).unwrap();
        for (_, t) in m.trainable_parameters() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += (i as f64).sin() * 1e-3);
        }
        let ck = Checkpoint::from_model(&m, "abc");
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.config_hash, "abc");
        for (a, b) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(a.0, b.0);
            let ab: Vec<u64> = a.2.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.2.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let fresh = Model::new(ModelConfig::default(), 99).unwrap();
        fresh.restore(&back, Some("abc")).unwrap();
        assert!(fresh.restore(&back, Some("other")).is_err());
        for ((_, a), (_, b)) in m.named_parameters().iter().zip(fresh.named_parameters()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        assert!(Checkpoint::from_bytes(b"LDCKPT1\n\xff\x00\x00\x00\x00\x00\x00\x00").is_err());
    }
}
