//! Binary checkpoint container.
//!
//! Layout: the 5 bytes `XLMP1`, a little-endian `u32` header length, a JSON
//! header, then every tensor's elements as little-endian `f32` in index
//! order. The payload carries no checksum: a flipped payload byte loads
//! without complaint and yields a different tensor.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::finetune::FinetuneMeta;
use crate::numerics::{ParamSet, Tensor};

use super::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 5] = b"XLMP1";

/// Training stage that produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Pretrain,
    Posttrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    stage: Stage,
    step: u64,
    config: EncoderConfig,
    train: Option<TrainConfig>,
    vocab: Option<Vocabulary>,
    finetune: Option<FinetuneMeta>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to rebuild a model and continue training it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: u64,
    pub config: EncoderConfig,
    pub train: Option<TrainConfig>,
    pub vocab: Option<Vocabulary>,
    pub finetune: Option<FinetuneMeta>,
    pub params: ParamSet<f32>,
    pub adam: Option<AdamState<f32>>,
    /// Task head weights of a fine-tuned model; names start with `head.`.
    pub head: Option<ParamSet<f32>>,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const HEAD: &str = "head.";

impl Checkpoint {
    /// A checkpoint holding only model weights.
    pub fn from_model(model: &EncoderModel, vocab: Option<&Vocabulary>) -> Self {
        Checkpoint {
            stage: Stage::Init,
            step: 0,
            config: model.config.clone(),
            train: None,
            vocab: vocab.cloned(),
            finetune: None,
            params: model.params.clone(),
            adam: None,
            head: None,
        }
    }

    pub fn model(&self) -> Result<EncoderModel> {
        EncoderModel::from_params(self.config.clone(), self.params.clone())
    }

    fn entries(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut all: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(adam) = &self.adam {
            all.extend(adam.m.iter().map(|(n, t)| (format!("{ADAM_M}{n}"), t)));
            all.extend(adam.v.iter().map(|(n, t)| (format!("{ADAM_V}{n}"), t)));
        }
        if let Some(head) = &self.head {
            all.extend(head.iter().map(|(n, t)| (n.to_string(), t)));
        }
        all
    }

    /// Serialized bytes; equal checkpoints give equal bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries = self.entries();
        let mut offset = 0;
        let index = entries
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f32".into(), offset };
                offset += t.len() * 4;
                e
            })
            .collect();
        let header = Header {
            format: String::from_utf8_lossy(MAGIC).into_owned(),
            stage: self.stage,
            step: self.step,
            config: self.config.clone(),
            train: self.train.clone(),
            vocab: self.vocab.clone(),
            finetune: self.finetune.clone(),
            tensors: index,
        };
        let json = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(9 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &entries {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..5] != MAGIC {
            return Err(Error::Checkpoint("unrecognized format magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(9..9 + header_len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let payload = &bytes[9 + header_len..];
        let mut params = ParamSet::new();
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        let mut head = ParamSet::new();
        let mut expected_offset = 0;
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(Error::Checkpoint(format!("{}: offset {} out of sequence", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset..e.offset + n * 4)
                .ok_or_else(|| Error::Checkpoint(format!("truncated payload at tensor {}", e.name)))?;
            expected_offset += n * 4;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
            if let Some(rest) = e.name.strip_prefix(ADAM_M) {
                m.insert(rest, t);
            } else if let Some(rest) = e.name.strip_prefix(ADAM_V) {
                v.insert(rest, t);
            } else if e.name.starts_with(HEAD) {
                head.insert(e.name.clone(), t);
            } else {
                params.insert(e.name.clone(), t);
            }
        }
        if payload.len() != expected_offset {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, index describes {expected_offset}",
                payload.len()
            )));
        }
        let adam = if m.is_empty() && v.is_empty() {
            None
        } else {
            if m.names().ne(params.names()) || v.names().ne(params.names()) {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
            Some(AdamState { m, v })
        };
        Ok(Checkpoint {
            stage: header.stage,
            step: header.step,
            config: header.config,
            train: header.train,
            vocab: header.vocab,
            finetune: header.finetune,
            params,
            adam,
            head: (!head.is_empty()).then_some(head),
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and rejects it unless its model config equals `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &EncoderConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.config != expected {
        return Err(Error::Checkpoint(format!(
            "{} was written for a different model configuration",
            path.display()
        )));
    }
    Ok(ckpt)
}
