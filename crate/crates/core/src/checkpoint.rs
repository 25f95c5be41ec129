//! TRGW checkpoints: a JSON config block followed by named `f32` tensors.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError};
use crate::params::ParamStore;
use crate::tensor::{Tensor, MAX_RANK};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TRGW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a TRGW checkpoint: magic bytes {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported TRGW version {found}, expected {CHECKPOINT_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("truncated TRGW file: needed {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("malformed TRGW file: {0}")]
    Malformed(String),
    #[error("checkpoint config block: {0}")]
    Config(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON document describing the run that produced the weights.
    pub config: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    /// Snapshot of every stored tensor, running statistics included.
    pub fn from_store(config: String, store: &ParamStore<f32>) -> Self {
        Self {
            config,
            records: store
                .iter()
                .map(|(_, p)| Record {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model of the given architecture and loads the stored tensors into it.
    pub fn restore(&self, config: ModelConfig) -> Result<Model<f32>, CheckpointError> {
        let mut model = Model::<f32>::build(config, 0)?;
        if model.store.len() != self.records.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} tensors stored, architecture has {}",
                self.records.len(),
                model.store.len()
            )));
        }
        for (p, r) in model.store.iter_mut().zip(&self.records) {
            if p.name != r.name || p.value.shape() != r.value.shape() {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    r.name,
                    r.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = r.value.clone();
        }
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.value.rank() as u32).to_le_bytes());
            for &d in r.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in r.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CheckpointError> {
        if buf.len() < 4 || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic {
                found: buf[..buf.len().min(4)].to_vec(),
            });
        }
        let mut r = Reader { buf, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("config block is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut records = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(CheckpointError::Malformed(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let value = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            records.push(Record { name, value });
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&buf)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated {
            expected: self.pos.saturating_add(n),
            actual: self.buf.len(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn model() -> Model<f32> {
        Model::build(
            ModelConfig {
                frames: 4,
                height: 8,
                width: 8,
                variant: Variant::Concat,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let cfg = serde_json::to_string(&m.config).unwrap();
        let ck = Checkpoint::from_store(cfg, &m.store);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        let restored = back.restore(m.config.clone()).unwrap();
        for ((_, a), (_, b)) in m.store.iter().zip(restored.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.trgw");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn errors_are_distinct() {
        let m = model();
        let bytes = Checkpoint::from_store("{}".into(), &m.store).encode();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::BadMagic { .. })));
        let mut ver = bytes.clone();
        ver[4] = 2;
        assert!(matches!(Checkpoint::decode(&ver), Err(CheckpointError::UnsupportedVersion { found: 2 })));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn restore_rejects_other_architectures() {
        let m = model();
        let ck = Checkpoint::from_store("{}".into(), &m.store);
        let other = ModelConfig {
            heads: 2,
            ..m.config.clone()
        };
        assert!(ck.restore(other).is_err());
    }
}
