//! Single-file checkpoints.
//!
//! Layout (little-endian): `"RTKC"`, u16 version, u32 length + JSON header,
//! u32 tensor count, then per tensor u32 name length, name bytes, u32 rank,
//! u32 dims, f32 data. Tokenizer checkpoints end with the `"RTKB"` codebook
//! block; generator checkpoints carry no codebook.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig, VqConfig};
use crate::error::{Error, Result};
use crate::model::Tokenizer;
use crate::nn::{to_f32_vec, ParamStore};
use crate::trainer::TrainState;
use crate::vq::Codebook;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RTKC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Tokenizer,
    Generator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Free-form JSON header; always holds `"kind"`.
    pub header: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
    pub codebook: Option<Codebook>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::corrupt("checkpoint", format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if (self.kind == CheckpointKind::Tokenizer) != self.codebook.is_some() {
            return Err(Error::invalid("tokenizer checkpoints carry a codebook, generators do not"));
        }
        let mut header = self.header.clone();
        header["kind"] = serde_json::to_value(self.kind)?;
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        put_u32(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::shape(format!("tensor `{}` dims disagree with data", t.name)));
            }
            put_u32(&mut out, t.name.len())?;
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.dims.len())?;
            for &d in &t.dims {
                put_u32(&mut out, d)?;
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(book) = &self.codebook {
            out.extend_from_slice(&book.to_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::corrupt("checkpoint", "bad magic"));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::corrupt("checkpoint", format!("unsupported version {version}")));
        }
        let len = r.u32("header length")?;
        let header: serde_json::Value = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| Error::corrupt("checkpoint", format!("header: {e}")))?;
        let kind: CheckpointKind = serde_json::from_value(header["kind"].clone())
            .map_err(|e| Error::corrupt("checkpoint", format!("kind: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.u32("name length")?;
            let name = String::from_utf8(r.take(n, "name")?.to_vec())
                .map_err(|_| Error::corrupt("checkpoint", "tensor name is not UTF-8"))?;
            let rank = r.u32("rank")?;
            let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
            let elems = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::corrupt("checkpoint", "tensor size overflows"))?;
            let raw = r.take(
                elems
                    .checked_mul(4)
                    .ok_or_else(|| Error::corrupt("checkpoint", "tensor size overflows"))?,
                "tensor data",
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        let codebook = match kind {
            CheckpointKind::Tokenizer => {
                let (book, used) = Codebook::from_bytes(&bytes[r.pos..])?;
                r.pos += used;
                Some(book)
            }
            CheckpointKind::Generator => None,
        };
        if r.pos != bytes.len() {
            return Err(Error::corrupt("checkpoint", "trailing bytes"));
        }
        Ok(Self {
            kind,
            header,
            tensors,
            codebook,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn header_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        serde_json::from_value(self.header[key].clone())
            .map_err(|e| Error::Config(format!("checkpoint header `{key}`: {e}")))
    }
}

/// Every parameter of a store as named `f32` tensors.
pub fn store_tensors(store: &ParamStore, prefix: &str) -> Result<Vec<NamedTensor>> {
    store
        .iter()
        .map(|(name, var)| {
            Ok(NamedTensor {
                name: format!("{prefix}{name}"),
                dims: var.dims().to_vec(),
                data: to_f32_vec(var.as_tensor())?,
            })
        })
        .collect()
}

/// Loads matching `prefix`ed tensors into a store; every parameter must be present.
pub fn restore_store(store: &ParamStore, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    for (name, var) in store.iter() {
        let key = format!("{prefix}{name}");
        let t = ckpt
            .tensor(&key)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{key}`")))?;
        if t.dims != var.dims() {
            return Err(Error::Config(format!(
                "checkpoint parameter `{key}` has shape {:?}, model expects {:?}",
                t.dims,
                var.dims()
            )));
        }
        let value = Tensor::from_vec(t.data.clone(), t.dims.as_slice(), store.device())?;
        store.assign(name, &value)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenizerHeader {
    model: ModelConfig,
    vq: VqConfig,
    train: TrainConfig,
    step: usize,
    optimizer_step: usize,
    codebook_ready: bool,
}

/// Weights, optimizer moments and codebook of a training run.
pub fn train_state_checkpoint(state: &TrainState) -> Result<Checkpoint> {
    let tok = &state.tokenizer;
    let header = TokenizerHeader {
        model: tok.model.clone(),
        vq: tok.vq.clone(),
        train: state.train.clone(),
        step: state.step,
        optimizer_step: state.optimizer.step,
        codebook_ready: state.codebook_ready,
    };
    let mut tensors = store_tensors(&tok.store, "")?;
    for (name, m, v) in &state.optimizer.moments {
        for (tag, t) in [("m", m), ("v", v)] {
            tensors.push(NamedTensor {
                name: format!("optim.{tag}.{name}"),
                dims: t.dims().to_vec(),
                data: to_f32_vec(t)?,
            });
        }
    }
    Ok(Checkpoint {
        kind: CheckpointKind::Tokenizer,
        header: serde_json::to_value(header)?,
        tensors,
        codebook: Some(tok.codebook.clone()),
    })
}

fn tokenizer_from(ckpt: &Checkpoint) -> Result<(Tokenizer, TokenizerHeader)> {
    if ckpt.kind != CheckpointKind::Tokenizer {
        return Err(Error::Config("expected a tokenizer checkpoint".into()));
    }
    let header: TokenizerHeader = serde_json::from_value(ckpt.header.clone())
        .map_err(|e| Error::Config(format!("tokenizer checkpoint header: {e}")))?;
    let mut tok = Tokenizer::new(header.model.clone(), header.vq.clone(), DType::F32)?;
    restore_store(&tok.store, ckpt, "")?;
    let book = ckpt.codebook.clone().expect("tokenizer checkpoints hold a codebook");
    if book.dim() != tok.model.code_dim {
        return Err(Error::Config(format!(
            "codebook width {} does not match code_dim {}",
            book.dim(),
            tok.model.code_dim
        )));
    }
    tok.codebook = book;
    Ok((tok, header))
}

/// Inference-only view of a tokenizer checkpoint.
pub fn load_tokenizer(path: impl AsRef<Path>) -> Result<Tokenizer> {
    Ok(tokenizer_from(&Checkpoint::load(path)?)?.0)
}

/// Restores a training run, including optimizer moments and the step counter.
pub fn load_train_state(path: impl AsRef<Path>) -> Result<TrainState> {
    let ckpt = Checkpoint::load(path)?;
    let (tok, header) = tokenizer_from(&ckpt)?;
    let mut state = TrainState::new(tok, header.train)?;
    state.step = header.step;
    state.codebook_ready = header.codebook_ready;
    state.optimizer.step = header.optimizer_step;
    let device = state.tokenizer.device().clone();
    for (name, m, v) in state.optimizer.moments.iter_mut() {
        for (tag, slot) in [("m", m), ("v", v)] {
            let key = format!("optim.{tag}.{name}");
            let t = ckpt
                .tensor(&key)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{key}`")))?;
            *slot = Tensor::from_vec(t.data.clone(), t.dims.as_slice(), &device)?;
        }
    }
    Ok(state)
}

pub fn save_train_state(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    train_state_checkpoint(state)?.save(path)
}
