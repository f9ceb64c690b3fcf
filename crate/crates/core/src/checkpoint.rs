//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `b"HARTCKPT"`, `u32` format version, `u64` header length, TOML header,
//! `u32` tensor count, then per tensor: `u32` name length, UTF-8 name,
//! `u8` dtype (0 = f64, 1 = f32), `u32` rank, `u64` extents, payload.
//! Tensors are written in a fixed order: model parameters, optimizer
//! moments (`opt.m/<name>`, `opt.v/<name>`), then extra tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::hart::HartModel;
use crate::model::{ModelConfig, ModelError};
use crate::numerics::{ParamStore, Tensor};
use crate::training::AdamW;

pub const MAGIC: &[u8; 8] = b"HARTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("header: {0}")]
    Header(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub code_version: String,
    pub seed: u64,
    pub epoch: usize,
    pub steps: usize,
    pub dev_nll: Option<f64>,
    /// Forward mode the weights were trained in.
    pub train_mode: String,
    pub config_hash: String,
    /// Fine-tuned head description, when the checkpoint carries one.
    pub task: Option<TaskMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMeta {
    /// `document` or `user`.
    pub kind: String,
    pub classes: Vec<String>,
    /// Forward mode used to build representations.
    pub mode: String,
    /// Representation source for document heads: `final` or `extract`.
    pub representation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: DType,
    model: ModelConfig,
    meta: CheckpointMeta,
    optimizer: Option<OptimizerHeader>,
    vocab: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: HartModel,
    pub vocab: Vocabulary,
    pub optimizer: Option<AdamW>,
    pub meta: CheckpointMeta,
    /// Task heads and other tensors outside the model.
    pub extra: ParamStore,
    pub dtype: DType,
}

impl Checkpoint {
    pub fn new(model: HartModel, vocab: Vocabulary, meta: CheckpointMeta) -> Self {
        Self {
            model,
            vocab,
            optimizer: None,
            meta,
            extra: ParamStore::new(),
            dtype: DType::F64,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = Header {
            dtype: self.dtype,
            model: self.model.config.clone(),
            meta: self.meta.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                step: o.step,
            }),
            vocab: self.vocab.tokens().to_vec(),
        };
        let text = toml::to_string(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut tensors: Vec<(String, &Tensor)> = self
            .model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        if let Some(o) = &self.optimizer {
            if o.m.len() != self.model.params.len() || o.v.len() != self.model.params.len() {
                return Err(CheckpointError::Corrupt(
                    "optimizer state does not match parameters".into(),
                ));
            }
            for (i, (name, _)) in self.model.params.iter().enumerate() {
                tensors.push((format!("opt.m/{name}"), &o.m[i]));
            }
            for (i, (name, _)) in self.model.params.iter().enumerate() {
                tensors.push((format!("opt.v/{name}"), &o.v[i]));
            }
        }
        tensors.extend(self.extra.iter().map(|(n, t)| (format!("extra/{n}"), t)));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(self.dtype.tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match self.dtype {
                DType::F64 => t
                    .data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => t
                    .data()
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(hlen)?)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let header: Header =
            toml::from_str(text).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let vocab = Vocabulary::parse(&header.vocab.join("\n"))
            .map_err(|e| CheckpointError::Header(e.to_string()))?;

        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        let mut extra = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = match tag {
                0 => r
                    .take(numel * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                1 => r
                    .take(numel * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                t => {
                    return Err(CheckpointError::Corrupt(format!(
                        "tensor {name}: unknown dtype tag {t}"
                    )))
                }
            };
            let t =
                Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if let Some(n) = name.strip_prefix("opt.m/") {
                m.insert(n, t);
            } else if let Some(n) = name.strip_prefix("opt.v/") {
                v.insert(n, t);
            } else if let Some(n) = name.strip_prefix("extra/") {
                extra.insert(n, t);
            } else {
                params.insert(name, t);
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let model = HartModel::from_params(header.model, params)?;
        let optimizer = match header.optimizer {
            None => None,
            Some(h) => {
                let moments = |store: &ParamStore| -> Result<Vec<Tensor>, CheckpointError> {
                    model
                        .params
                        .names()
                        .map(|n| {
                            store.get(n).cloned().map_err(|_| {
                                CheckpointError::Corrupt(format!(
                                    "missing optimizer moment for {n}"
                                ))
                            })
                        })
                        .collect()
                };
                Some(AdamW {
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                    weight_decay: h.weight_decay,
                    step: h.step,
                    m: moments(&m)?,
                    v: moments(&v)?,
                })
            }
        };
        Ok(Self {
            model,
            vocab,
            optimizer,
            meta: header.meta,
            extra,
            dtype: header.dtype,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut cfg = ModelConfig::new(8, 4, 2, 2, 4);
        cfg.dropout = 0.0;
        let model = HartModel::init(cfg, 5).unwrap();
        let vocab = Vocabulary::from_words(["a", "b", "c", "d", "e"]);
        let mut c = Checkpoint::new(
            model,
            vocab,
            CheckpointMeta {
                dev_nll: Some(1.0 / 3.0),
                ..Default::default()
            },
        );
        let mut opt = AdamW::new(&c.model.params, 0.9, 0.999, 1e-8, 0.01);
        opt.step = 7;
        opt.m[0].data_mut()[0] = -2.5e-7;
        c.optimizer = Some(opt);
        c.extra.insert("head.w", Tensor::full(&[4, 2], 0.125));
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let a = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes().unwrap(), a);
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.meta, c.meta);
    }

    #[test]
    fn f32_round_trip_is_stable() {
        let mut c = sample();
        c.dtype = DType::F32;
        let a = c.to_bytes().unwrap();
        let b = Checkpoint::from_bytes(&a).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_damage() {
        let a = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(b"NOTACKPTxxxx"),
            Err(CheckpointError::BadMagic)
        ));
        assert!(Checkpoint::from_bytes(&a[..a.len() - 3]).is_err());
        let mut longer = a.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }
}
