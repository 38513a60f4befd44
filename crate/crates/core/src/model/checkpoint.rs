use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::autodiff::{Real, Tensor};
use crate::data::Vocabulary;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMLK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Versioned container: config, step counter, seed, optional vocabulary,
/// free-form settings and named f32 tensors.
///
/// Layout: magic | version u16 LE | header length u32 LE | header JSON |
/// tensor data as f32 LE in header order | CRC32 of everything before it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub vocab: Option<Vocabulary>,
    pub settings: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    seed: u64,
    vocab: Option<Vocabulary>,
    settings: BTreeMap<String, String>,
    blobs: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, step: u64, seed: u64) -> Self {
        Checkpoint {
            config,
            step,
            seed,
            vocab: None,
            settings: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    /// Stores every parameter under `prefix/name`.
    pub fn put_params<T: Real>(&mut self, prefix: &str, params: &ModelParams<T>) {
        for (name, t) in params.iter() {
            self.tensors.insert(format!("{prefix}/{name}"), t.cast());
        }
    }

    /// Reads back a parameter set stored with [`Checkpoint::put_params`].
    pub fn params<T: Real>(&self, prefix: &str) -> Result<ModelParams<T>> {
        let lead = format!("{prefix}/");
        let map: BTreeMap<String, Tensor<T>> = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&lead).map(|n| (n.to_string(), v.cast())))
            .collect();
        if map.is_empty() {
            return Err(Error::Data(format!("checkpoint has no {prefix:?} parameters")));
        }
        let params = ModelParams::from_map(map);
        params.check_layout(&self.config)?;
        Ok(params)
    }

    pub fn has_params(&self, prefix: &str) -> bool {
        let lead = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&lead))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            seed: self.seed,
            vocab: self.vocab.clone(),
            settings: self.settings.clone(),
            blobs: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let numel: usize = self.tensors.values().map(|t| t.numel()).sum();
        let mut out = Vec::with_capacity(14 + json.len() + 4 * numel);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let len = u32::try_from(json.len()).map_err(|_| Error::invalid("checkpoint header too large"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < 14 {
            return Err(fail(0, format!("expected at least 14 bytes, found {}", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail(0, "bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(fail(4, format!("unsupported checkpoint version {version}")));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return Err(fail(body_end, "checkpoint checksum mismatch".into()));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        if 10 + hlen > body_end {
            return Err(fail(6, format!("header length {hlen} exceeds file size")));
        }
        let header: Header = serde_json::from_slice(&bytes[10..10 + hlen])?;
        header.config.validate()?;
        let mut pos = 10 + hlen;
        let mut tensors = BTreeMap::new();
        for (name, shape) in header.blobs {
            let n: usize = shape.iter().product();
            let end = pos + 4 * n;
            if end > body_end {
                return Err(fail(
                    pos,
                    format!("expected {} bytes for {name}, found {}", 4 * n, body_end - pos),
                ));
            }
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
            pos = end;
        }
        if pos != body_end {
            return Err(fail(pos, format!("{} trailing bytes after tensors", body_end - pos)));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            seed: header.seed,
            vocab: header.vocab,
            settings: header.settings,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            model_dim: 8,
            feedforward_dim: 16,
            num_heads: 2,
            num_memory_slots: 2,
            vocab_size: 10,
            feature_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny();
        let p = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let mut ck = Checkpoint::new(cfg, 17, 99);
        ck.put_params("online", &p);
        ck.settings.insert("lambda".into(), "0.5".into());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params::<f32>("online").unwrap(), p);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let cfg = tiny();
        let mut ck = Checkpoint::new(cfg.clone(), 0, 0);
        ck.put_params("target", &ModelParams::<f32>::init(&cfg, 0).unwrap());
        let mut bytes = ck.to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(ck.params::<f32>("online").is_err());
    }
}
