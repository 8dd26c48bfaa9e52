//! Binary checkpoint container.
//!
//! ```text
//! "GLMA" | u32 version | u64 payload length | payload | u32 CRC-32(payload)
//! payload = u32 header length | JSON header | f32 tensors, row-major
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use trajforge_core::{GridSpec, TimeSpec, Vocabulary};

use crate::config::{LoraConfig, ModelConfig, TrainConfig};
use crate::error::{LmError, Result};
use crate::lora::LoraAdapter;
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GLMA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams<f32>,
    pub adapter: Option<LoraAdapter<f32>>,
    /// The configuration the weights were trained with, if any.
    pub train: Option<TrainConfig>,
    pub grid: GridSpec,
    pub timespec: TimeSpec,
    /// Training-set visit counts by duration; entry `i` counts `i + 1` slots.
    pub duration_counts: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    lora: Option<LoraConfig>,
    grid: GridSpec,
    timespec: TimeSpec,
    vocab_hash: String,
    duration_counts: Vec<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(&self.grid, &self.timespec)
    }

    fn tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut t = self.model.named();
        if let Some(a) = &self.adapter {
            t.extend(a.named());
        }
        t
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let header = Header {
            model: self.model.config.clone(),
            train: self.train.clone(),
            lora: self.adapter.as_ref().map(|a| a.config.clone()),
            grid: self.grid,
            timespec: self.timespec,
            vocab_hash: self.vocabulary().content_hash(),
            duration_counts: self.duration_counts.clone(),
            tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape.clone() }).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| LmError::BadHeader(e.to_string()))?;
        let n_floats: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        let mut payload = Vec::with_capacity(4 + json.len() + 4 * n_floats);
        payload.extend_from_slice(&(json.len() as u32).to_le_bytes());
        payload.extend_from_slice(&json);
        for (_, t) in &tensors {
            for x in &t.data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 20);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(if MAGIC.starts_with(bytes) { LmError::TruncatedFile } else { LmError::BadMagic });
        }
        if bytes.len() < 16 {
            return Err(LmError::TruncatedFile);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(LmError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let payload_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let end = usize::try_from(payload_len).ok().and_then(|p| p.checked_add(16)).ok_or(LmError::TruncatedFile)?;
        if bytes.len() < end + 4 {
            return Err(LmError::TruncatedFile);
        }
        if bytes.len() > end + 4 {
            return Err(LmError::BadHeader(format!("{} trailing bytes after checksum", bytes.len() - end - 4)));
        }
        let payload = &bytes[16..end];
        let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(LmError::ChecksumMismatch);
        }
        let bad = |m: String| LmError::BadHeader(m);
        if payload.len() < 4 {
            return Err(bad("payload too short".into()));
        }
        let hlen = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
        let json = payload.get(4..4 + hlen).ok_or_else(|| bad("header length exceeds payload".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
        header.model.validate()?;
        let vocab = Vocabulary::build(&header.grid, &header.timespec);
        if vocab.content_hash() != header.vocab_hash || vocab.len() != header.model.vocab_size {
            return Err(LmError::VocabularyMismatch);
        }

        let mut ck = Checkpoint {
            model: ModelParams::zeros(&header.model),
            adapter: header.lora.map(|l| LoraAdapter::zeros(&header.model, l)).transpose()?,
            train: header.train,
            grid: header.grid,
            timespec: header.timespec,
            duration_counts: header.duration_counts,
        };
        let mut data = &payload[4 + hlen..];
        let mut slots: BTreeMap<String, &mut Tensor<f32>> = ck.model.named_mut().into_iter().collect();
        if let Some(a) = ck.adapter.as_mut() {
            slots.extend(a.named_mut());
        }
        if slots.len() != header.tensors.len() {
            return Err(bad(format!("expected {} tensors, header lists {}", slots.len(), header.tensors.len())));
        }
        for entry in &header.tensors {
            let t = slots.remove(&entry.name).ok_or_else(|| bad(format!("unexpected tensor {}", entry.name)))?;
            if t.shape != entry.shape {
                return Err(bad(format!("tensor {} has shape {:?}, expected {:?}", entry.name, entry.shape, t.shape)));
            }
            let nbytes = 4 * t.len();
            if data.len() < nbytes {
                return Err(bad("tensor data shorter than header declares".into()));
            }
            for (x, chunk) in t.data.iter_mut().zip(data[..nbytes].chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            data = &data[nbytes..];
        }
        if !data.is_empty() {
            return Err(bad(format!("{} unused tensor bytes", data.len())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Proj;
    use trajforge_core::rng;

    fn sample() -> Checkpoint {
        let grid = GridSpec::new(40.0, 116.0, 1.0, 2, 3).unwrap();
        let timespec = TimeSpec { slot_minutes: 60 };
        let vocab = Vocabulary::build(&grid, &timespec);
        let c = ModelConfig { vocab_size: vocab.len(), d_model: 8, n_layers: 2, n_heads: 2, max_seq_len: 32, dropout: 0.0 };
        let model = ModelParams::init(&c, 4).unwrap();
        let lora = LoraConfig { rank: 2, targets: vec![Proj::Q, Proj::O], ..Default::default() };
        let adapter = LoraAdapter::init(&c, lora, &mut rng::stream(4, "lora", 0)).unwrap();
        Checkpoint {
            model,
            adapter: Some(adapter),
            train: Some(TrainConfig::default()),
            grid,
            timespec,
            duration_counts: vec![3, 0, 1],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let plain = Checkpoint { adapter: None, train: None, ..ck };
        assert_eq!(Checkpoint::from_bytes(&plain.to_bytes().unwrap()).unwrap(), plain);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for pos in [20, bytes.len() / 2, bytes.len() - 5] {
            let mut b = bytes.clone();
            b[pos] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&b), Err(LmError::ChecksumMismatch)), "pos {pos}");
        }
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(LmError::BadMagic)));
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(LmError::VersionMismatch { found: 9, expected: 1 })));
        for len in [2, 10, 100, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..len]), Err(LmError::TruncatedFile)), "len {len}");
        }
        assert!(matches!(Checkpoint::from_bytes(b"PK\x03\x04rest"), Err(LmError::BadMagic)));
    }
}
