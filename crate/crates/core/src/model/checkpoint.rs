//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LEXKI\0"  u32 version  u32 header_len  header (JSON)
//! u32 tensor_count
//! per tensor: u32 name_len  name (UTF-8)  u32 rank  u32 dims[rank]  f32 data[prod(dims)]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::seq2seq::DialogModel;
use crate::error::{Error, Result};
use crate::ki::{KiConfig, KiHead};
use crate::numerics::{ParamStore, Rng, Tensor};
use crate::retriever::RetrieverConfig;

pub const MAGIC: &[u8; 6] = b"LEXKI\0";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 1 << 12;
const MAX_RANK: usize = 8;
const MAX_HEADER: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointHeader {
    Dialog {
        model: ModelConfig,
        ki: Option<KiConfig>,
        vocab: Option<String>,
    },
    Retriever {
        retriever: RetrieverConfig,
        vocab: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = r.u32("header length")? as usize;
        if hlen > MAX_HEADER {
            return Err(Error::Checkpoint(format!("header length {hlen} too large")));
        }
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            if nlen > MAX_NAME {
                return Err(Error::Checkpoint(format!("name length {nlen} too large")));
            }
            let name = std::str::from_utf8(r.take(nlen, "name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("rank {rank} too large for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u32("dims")? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("shape of {name} overflows")))?;
                shape.push(d);
            }
            let bytes = numel
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint(format!("shape of {name} overflows")))?;
            let raw = r.take(bytes, "tensor data")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("non-finite value in {name}")));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_store(header: CheckpointHeader, store: &ParamStore) -> Checkpoint {
        Checkpoint {
            header,
            tensors: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Copy tensors into a store with the same architecture. Names, order
    /// and shapes must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, architecture expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, (name, t)) in ids.into_iter().zip(&self.tensors) {
            if store.name(id) != name {
                return Err(Error::Checkpoint(format!("expected tensor {}, found {name}", store.name(id))));
            }
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

impl DialogModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            CheckpointHeader::Dialog {
                model: self.config.clone(),
                ki: self.ki().map(|k| k.config().clone()),
                vocab: self.vocab_fingerprint.clone(),
            },
            &self.store,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<DialogModel> {
        let CheckpointHeader::Dialog { model, ki, vocab } = &ck.header else {
            return Err(Error::Checkpoint("not a dialog model checkpoint".into()));
        };
        let mut m = DialogModel::new(model.clone(), 0)?;
        if let Some(kc) = ki {
            let embed = m.net().embed_id();
            let head = KiHead::register(&mut m.store, &m.config, embed, kc.clone(), &mut Rng::new(0))?;
            m.set_ki(Some(head));
        }
        ck.restore_into(&mut m.store)?;
        m.vocab_fingerprint = vocab.clone();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<DialogModel> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
