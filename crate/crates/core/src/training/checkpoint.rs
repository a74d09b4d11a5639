//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MTAWCKPT" | version u32 | meta_len u32 | meta (UTF-8 key=value lines)
//! | tensor_count u32 | tensors... | sha256 of everything before it (32 bytes)
//! tensor: name_len u16 | name | rank u8 | dims u64 * rank | f64 * product(dims)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"MTAWCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not fit the model: {0}")]
    Incompatible(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub adam_step: u64,
    pub seed: u64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub state: TrainState,
    /// Digest of the vocabulary the item IDs refer to.
    pub vocab_digest: Option<String>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.meta_text();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let named = self.params.named(&self.model);
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, tensor) in named {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.rank() as u8);
            for &dim in tensor.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    fn meta_text(&self) -> String {
        let m = &self.model;
        let s = &self.state;
        let mut lines = vec![
            format!("num_items={}", m.num_items),
            format!("embed_dim={}", m.embed_dim),
            format!("ffn_dim={}", m.ffn_dim),
            format!("max_len={}", m.max_len),
            format!("dropout_rate={}", m.dropout_rate),
            format!("score_temperature={}", m.score_temperature),
            format!("epoch={}", s.epoch),
            format!("adam_step={}", s.adam_step),
            format!("seed={}", s.seed),
            format!("gamma={}", s.gamma),
        ];
        if let Some(d) = &self.vocab_digest {
            lines.push(format!("vocab_digest={d}"));
        }
        lines.join("\n")
    }

    /// Verifies magic, version and checksum, in that order, then parses.
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut reader = Reader { bytes, pos: MAGIC.len() };
        let version = reader.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        if bytes.len() < reader.pos + DIGEST_LEN {
            return Err(CheckpointError::Corrupt("truncated before checksum".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::ChecksumMismatch);
        }
        reader.bytes = body;

        let meta_len = reader.u32()? as usize;
        let meta = std::str::from_utf8(reader.take(meta_len)?).map_err(|_| corrupt("metadata is not UTF-8"))?;
        let meta = parse_meta(meta)?;
        let model = ModelConfig {
            num_items: meta.get("num_items")?,
            embed_dim: meta.get("embed_dim")?,
            ffn_dim: meta.get("ffn_dim")?,
            max_len: meta.get("max_len")?,
            dropout_rate: meta.get("dropout_rate")?,
            score_temperature: meta.get("score_temperature")?,
        };
        model.validate()?;
        let state = TrainState {
            epoch: meta.get("epoch")?,
            adam_step: meta.get("adam_step")?,
            seed: meta.get("seed")?,
            gamma: meta.get("gamma")?,
        };
        let vocab_digest = meta.0.get("vocab_digest").cloned();

        let count = reader.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(16));
        for _ in 0..count {
            let name_len = reader.u16()? as usize;
            let name = std::str::from_utf8(reader.take(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_owned();
            let rank = reader.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(reader.u64()?).map_err(|_| corrupt("dimension overflows usize"))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt("tensor size overflows"))?;
            let byte_len = len.checked_mul(8).ok_or_else(|| corrupt("tensor size overflows"))?;
            let data = reader
                .take(byte_len)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(format!("tensor {name}: {e}")))?;
            tensors.push((name, tensor));
        }
        if reader.pos != reader.bytes.len() {
            return Err(corrupt("trailing bytes after tensors"));
        }
        let params = ModelParams::from_named(&model, tensors)?;
        Ok(Self {
            model,
            state,
            vocab_digest,
            params,
        })
    }

    /// Decodes and requires the stored tensors to fit `expected` exactly.
    pub fn decode_for(bytes: &[u8], expected: &ModelConfig) -> Result<Self, CheckpointError> {
        let mut ckpt = Self::decode(bytes)?;
        let tensors = ckpt
            .params
            .named(&ckpt.model)
            .into_iter()
            .map(|(n, t)| (n.to_owned(), t.clone()))
            .collect();
        ckpt.params = ModelParams::from_named(expected, tensors)?;
        ckpt.model = expected.clone();
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(fs::write(path, self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&fs::read(path)?)
    }
}

fn corrupt(msg: &str) -> CheckpointError {
    CheckpointError::Corrupt(msg.to_owned())
}

struct Meta(BTreeMap<String, String>);

impl Meta {
    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self
            .0
            .get(key)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing metadata key {key}")))?;
        raw.parse()
            .map_err(|_| CheckpointError::Corrupt(format!("bad value for {key}: {raw:?}")))
    }
}

fn parse_meta(text: &str) -> Result<Meta, CheckpointError> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Corrupt(format!("bad metadata line {line:?}")))?;
        if map.insert(k.to_owned(), v.to_owned()).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate metadata key {k}")));
        }
    }
    Ok(Meta(map))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt("unexpected end of data"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
