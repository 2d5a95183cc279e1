//! `TSEP` checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        4 bytes  "TSEP"
//! version      u32
//! width        u8       payload bytes per scalar, 4 (f32) or 8 (f64)
//! config       u32 length + UTF-8 `key = value` lines (ModelConfig)
//! meta         u32 length + UTF-8 `key = value` lines (training state)
//! count        u32
//! tensors      count x { u32 name length, name bytes, u32 rank,
//!                        rank x u32 extents, payload }
//! ```

use std::path::Path;

use crate::autodiff::{AdamConfig, AdamState};
use crate::config::{KvMap, ModelConfig};
use crate::error::{Error, Result};
use crate::model::TinySepformer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSEP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub meta: KvMap,
    pub tensors: Vec<NamedTensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &TinySepformer<T>) -> Self {
        Self {
            config: model.config.clone(),
            meta: KvMap::default(),
            tensors: model
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    tensor: p.value.clone(),
                })
                .collect(),
        }
    }

    /// Append optimizer moments as `adam.m/<param>` and `adam.v/<param>`.
    pub fn with_adam(mut self, model: &TinySepformer<T>, adam: &AdamState<T>) -> Self {
        for (p, (m, v)) in model.params.iter().zip(adam.m.iter().zip(&adam.v)) {
            self.tensors.push(NamedTensor {
                name: format!("adam.m/{}", p.name),
                tensor: m.clone(),
            });
            self.tensors.push(NamedTensor {
                name: format!("adam.v/{}", p.name),
                tensor: v.clone(),
            });
        }
        let c = adam.config;
        self.meta.insert("adam.step", adam.step);
        self.meta.insert("adam.lr", format!("{:e}", c.lr));
        self.meta.insert("adam.beta1", c.beta1);
        self.meta.insert("adam.beta2", c.beta2);
        self.meta.insert("adam.eps", format!("{:e}", c.eps));
        self
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    /// Rebuild the model described by the stored config and overwrite every
    /// parameter with its stored value.
    pub fn build_model(&self) -> Result<TinySepformer<T>> {
        let mut model = TinySepformer::new(self.config.clone())?;
        for p in model.params.iter_mut() {
            let stored = self
                .tensor(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", p.name)))?;
            if stored.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    p.name,
                    stored.shape(),
                    p.value.shape()
                )));
            }
            p.value = stored.clone();
        }
        Ok(model)
    }

    /// Optimizer state, if the checkpoint carries one.
    pub fn adam_state(&self, model: &TinySepformer<T>) -> Result<Option<AdamState<T>>> {
        let Some(step) = self.meta.get::<u64>("adam.step")? else {
            return Ok(None);
        };
        let d = AdamConfig::default();
        let config = AdamConfig {
            lr: self.meta.get_or("adam.lr", d.lr)?,
            beta1: self.meta.get_or("adam.beta1", d.beta1)?,
            beta2: self.meta.get_or("adam.beta2", d.beta2)?,
            eps: self.meta.get_or("adam.eps", d.eps)?,
        };
        let mut state = AdamState::new(&model.params, config)?;
        state.step = step;
        for (i, p) in model.params.iter().enumerate() {
            for (prefix, slot) in [("adam.m", &mut state.m[i]), ("adam.v", &mut state.v[i])] {
                let name = format!("{prefix}/{}", p.name);
                let t = self
                    .tensor(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Format(format!("{name} has shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        Ok(Some(state))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::WIDTH as u8);
        for text in [self.config.to_kv().render(), self.meta.render()] {
            put_u32(&mut out, text.len());
            out.extend_from_slice(text.as_bytes());
        }
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.tensor.rank());
            for &e in t.tensor.shape() {
                put_u32(&mut out, e);
            }
            for &v in t.tensor.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parse a container. Payloads of either width are converted to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a TSEP checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let width = r.take(1)?[0] as usize;
        if width != 4 && width != 8 {
            return Err(Error::Format(format!("unsupported payload width {width}")));
        }
        let config = ModelConfig::from_kv(&KvMap::parse(&r.text()?)?)?;
        let meta = KvMap::parse(&r.text()?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * width)?;
            let data = payload
                .chunks_exact(width)
                .map(|b| match width {
                    4 => T::from_f64_lossy(f32::read_le(b) as f64),
                    _ => T::from_f64_lossy(f64::read_le(b)),
                })
                .collect();
            tensors.push(NamedTensor {
                name,
                tensor: Tensor::new(shape, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Payload width recorded in a checkpoint file, without decoding tensors.
pub fn stored_width(path: &Path) -> Result<usize> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a TSEP checkpoint (bad magic)".into()));
    }
    Ok(bytes[8] as usize)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))
    }
}
