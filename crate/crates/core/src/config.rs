//! Model hyperparameters and the flat `section.key = value` text format
//! shared by config files and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `section.key = value` lines. `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Format(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Format(format!("bad value for {key}: `{s}`"))),
        }
    }

    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            filters: 256,
            kernel: 16,
            stride: 8,
        }
    }
}

/// One IntraCA or InterCA network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaConfig {
    /// Channels routed through the separable-convolution path.
    pub d_conv: usize,
    /// Channels routed through multi-head attention.
    pub d_attn: usize,
    pub heads: usize,
    pub kernel: usize,
    pub d_ff: usize,
}

impl CaConfig {
    pub fn intra_default() -> Self {
        Self {
            d_conv: 128,
            d_attn: 128,
            heads: 8,
            kernel: 51,
            d_ff: 1024,
        }
    }

    pub fn inter_default() -> Self {
        Self {
            kernel: 11,
            ..Self::intra_default()
        }
    }

    pub fn width(&self) -> usize {
        self.d_conv + self.d_attn
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.d_conv + self.d_attn != d {
            return Err(Error::Config(format!(
                "channel split {} + {} does not equal model width {}",
                self.d_conv, self.d_attn, d
            )));
        }
        if self.d_attn > 0 && (self.heads == 0 || self.d_attn % self.heads != 0) {
            return Err(Error::Config(format!(
                "{} heads do not divide attention width {}",
                self.heads, self.d_attn
            )));
        }
        if self.d_conv > 0 && self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "convolution kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub chunk: usize,
    pub speakers: usize,
    pub n_mask: usize,
    pub n_intra: usize,
    pub n_inter: usize,
    pub intra: CaConfig,
    pub inter: CaConfig,
    pub shared: bool,
    pub sample_rate: u32,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            chunk: 250,
            speakers: 2,
            n_mask: 2,
            n_intra: 4,
            n_inter: 4,
            intra: CaConfig::intra_default(),
            inter: CaConfig::inter_default(),
            shared: false,
            sample_rate: 8000,
            norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Model width D, equal to the encoder filter count.
    pub fn width(&self) -> usize {
        self.encoder.filters
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.filters == 0 || e.kernel == 0 || e.stride == 0 {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if e.stride > e.kernel {
            return Err(Error::Config(format!(
                "encoder stride {} exceeds kernel {}",
                e.stride, e.kernel
            )));
        }
        if self.chunk < 2 || self.chunk % 2 != 0 {
            return Err(Error::Config(format!(
                "chunk size must be even and >= 2, got {}",
                self.chunk
            )));
        }
        if self.speakers < 2 {
            return Err(Error::Config("need at least two speakers".into()));
        }
        if self.n_mask == 0 || self.n_intra == 0 || self.n_inter == 0 {
            return Err(Error::Config("iteration counts must be >= 1".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm eps must be positive".into()));
        }
        self.intra.validate(self.width())?;
        self.inter.validate(self.width())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let ca = |prefix: &str, def: CaConfig| -> Result<CaConfig> {
            Ok(CaConfig {
                d_conv: kv.get_or(&format!("{prefix}.d_conv"), def.d_conv)?,
                d_attn: kv.get_or(&format!("{prefix}.d_attn"), def.d_attn)?,
                heads: kv.get_or(&format!("{prefix}.heads"), def.heads)?,
                kernel: kv.get_or(&format!("{prefix}.kernel"), def.kernel)?,
                d_ff: kv.get_or(&format!("{prefix}.d_ff"), def.d_ff)?,
            })
        };
        let cfg = Self {
            encoder: EncoderConfig {
                filters: kv.get_or("encoder.filters", d.encoder.filters)?,
                kernel: kv.get_or("encoder.kernel", d.encoder.kernel)?,
                stride: kv.get_or("encoder.stride", d.encoder.stride)?,
            },
            chunk: kv.get_or("mask.chunk", d.chunk)?,
            speakers: kv.get_or("model.speakers", d.speakers)?,
            n_mask: kv.get_or("mask.n_mask", d.n_mask)?,
            n_intra: kv.get_or("mask.n_intra", d.n_intra)?,
            n_inter: kv.get_or("mask.n_inter", d.n_inter)?,
            intra: ca("intra", d.intra)?,
            inter: ca("inter", d.inter)?,
            shared: kv.get_or("mask.shared", d.shared)?,
            sample_rate: kv.get_or("model.sample_rate", d.sample_rate)?,
            norm_eps: kv.get_or("model.norm_eps", d.norm_eps)?,
            seed: kv.get_or("model.seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("encoder.filters", self.encoder.filters);
        kv.insert("encoder.kernel", self.encoder.kernel);
        kv.insert("encoder.stride", self.encoder.stride);
        kv.insert("mask.chunk", self.chunk);
        kv.insert("model.speakers", self.speakers);
        kv.insert("mask.n_mask", self.n_mask);
        kv.insert("mask.n_intra", self.n_intra);
        kv.insert("mask.n_inter", self.n_inter);
        kv.insert("mask.shared", self.shared);
        for (prefix, c) in [("intra", &self.intra), ("inter", &self.inter)] {
            kv.insert(format!("{prefix}.d_conv"), c.d_conv);
            kv.insert(format!("{prefix}.d_attn"), c.d_attn);
            kv.insert(format!("{prefix}.heads"), c.heads);
            kv.insert(format!("{prefix}.kernel"), c.kernel);
            kv.insert(format!("{prefix}.d_ff"), c.d_ff);
        }
        kv.insert("model.sample_rate", self.sample_rate);
        kv.insert("model.norm_eps", format!("{:e}", self.norm_eps));
        kv.insert("model.seed", self.seed);
        kv
    }

    /// Desk-scale configuration used by smoke training and gradient checks.
    pub fn tiny() -> Self {
        let ca = CaConfig {
            d_conv: 8,
            d_attn: 8,
            heads: 2,
            kernel: 3,
            d_ff: 32,
        };
        Self {
            encoder: EncoderConfig {
                filters: 16,
                kernel: 4,
                stride: 2,
            },
            chunk: 8,
            speakers: 2,
            n_mask: 1,
            n_intra: 1,
            n_inter: 1,
            intra: ca,
            inter: ca,
            shared: false,
            sample_rate: 8000,
            norm_eps: 1e-5,
            seed: 0,
        }
    }
}
