//! A run file: model, training, data, evaluation and gradient-check
//! settings in one flat `section.key = value` text.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::autodiff::AdamConfig;
use crate::config::{KvMap, ModelConfig};
use crate::error::{Error, Result};

use super::synth::{default_bands, SourceKind, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(()),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub steps: u64,
    pub adam: AdamConfig,
    /// Size of the fixed training set, cycled by step index.
    pub mixtures: usize,
    pub batch: usize,
    pub precision: Precision,
    /// Cap on training signal length in samples.
    pub max_len: Option<usize>,
    pub resume: Option<PathBuf>,
    pub log_every: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub mixtures: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSettings {
    pub coords: usize,
    pub threshold: f64,
    pub length: usize,
    pub seed: u64,
    pub step: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            coords: 200,
            threshold: 1e-5,
            length: 256,
            seed: 0,
            step: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub data: SyntheticSpec,
    pub eval: EvalSettings,
    pub grad_check: GradCheckSettings,
    pub output_dir: PathBuf,
}

const MODEL_KEYS: &[&str] = &[
    "encoder.filters",
    "encoder.kernel",
    "encoder.stride",
    "mask.chunk",
    "mask.n_mask",
    "mask.n_intra",
    "mask.n_inter",
    "mask.shared",
    "model.speakers",
    "model.sample_rate",
    "model.norm_eps",
    "model.seed",
];

const CA_KEYS: &[&str] = &["d_conv", "d_attn", "heads", "kernel", "d_ff"];

const RUN_KEYS: &[&str] = &[
    "train.steps",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.seed",
    "train.mixtures",
    "train.batch",
    "train.precision",
    "train.max_len",
    "train.resume",
    "train.log_every",
    "data.kind",
    "data.components",
    "data.length",
    "data.bands",
    "data.snr_min",
    "data.snr_max",
    "data.seed",
    "eval.mixtures",
    "eval.seed",
    "gradcheck.coords",
    "gradcheck.threshold",
    "gradcheck.length",
    "gradcheck.seed",
    "gradcheck.step",
    "output.dir",
];

fn known(key: &str) -> bool {
    if MODEL_KEYS.contains(&key) || RUN_KEYS.contains(&key) {
        return true;
    }
    match key.split_once('.') {
        Some(("intra" | "inter", k)) => CA_KEYS.contains(&k),
        _ => false,
    }
}

fn parse_bands(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(',')
        .map(|b| {
            let b = b.trim();
            let (lo, hi) = b.split_once('-').unwrap_or((b, b));
            let p = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad band `{b}`")))
            };
            Ok((p(lo)?, p(hi)?))
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        if let Some((k, _)) = kv.iter().find(|(k, _)| !known(k)) {
            return Err(Error::Config(format!("unknown key {k}")));
        }
        let seed: u64 = kv.get_or("train.seed", 0)?;
        let mut model_kv = kv.clone();
        if kv.get_str("model.seed").is_none() {
            model_kv.insert("model.seed", seed);
        }
        let model = ModelConfig::from_kv(&model_kv)?;

        let d = AdamConfig::default();
        let train = TrainSettings {
            steps: kv.get_or("train.steps", 500)?,
            adam: AdamConfig {
                lr: kv.get_or("train.lr", d.lr)?,
                beta1: kv.get_or("train.beta1", d.beta1)?,
                beta2: kv.get_or("train.beta2", d.beta2)?,
                eps: kv.get_or("train.eps", d.eps)?,
            },
            mixtures: kv.get_or("train.mixtures", 32)?,
            batch: kv.get_or("train.batch", 1)?,
            precision: kv.get_or("train.precision", Precision::F32)?,
            max_len: kv.get("train.max_len")?,
            resume: kv.get_str("train.resume").map(PathBuf::from),
            log_every: kv.get_or("train.log_every", 50)?,
        };
        train.adam.validate()?;
        if train.mixtures == 0 || train.batch == 0 {
            return Err(Error::Config("train.mixtures and train.batch must be >= 1".into()));
        }

        let kind = match kv.get_str("data.kind").unwrap_or("sinusoid") {
            "sinusoid" => SourceKind::Sinusoid,
            "noise" => SourceKind::NoiseBand(kv.get_or("data.components", 8)?),
            other => return Err(Error::Config(format!("unknown data.kind {other}"))),
        };
        let bands = match kv.get_str("data.bands") {
            Some(b) => parse_bands(b)?,
            None => default_bands(model.speakers, model.sample_rate),
        };
        let data = SyntheticSpec {
            speakers: model.speakers,
            length: kv.get_or("data.length", 512)?,
            sample_rate: model.sample_rate,
            kind,
            bands,
            snr_db: (kv.get_or("data.snr_min", 0.0)?, kv.get_or("data.snr_max", 0.0)?),
            seed: kv.get_or("data.seed", 1)?,
        };
        data.validate()?;

        let eval = EvalSettings {
            mixtures: kv.get_or("eval.mixtures", 16)?,
            seed: kv.get_or("eval.seed", 1001)?,
        };
        let g = GradCheckSettings::default();
        let grad_check = GradCheckSettings {
            coords: kv.get_or("gradcheck.coords", g.coords)?,
            threshold: kv.get_or("gradcheck.threshold", g.threshold)?,
            length: kv.get_or("gradcheck.length", g.length)?,
            seed: kv.get_or("gradcheck.seed", g.seed)?,
            step: kv.get_or("gradcheck.step", g.step)?,
        };
        Ok(Self {
            model,
            train,
            data,
            eval,
            grad_check,
            output_dir: PathBuf::from(kv.get_str("output.dir").unwrap_or(".")),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Training data with the length cap applied.
    pub fn train_data(&self) -> SyntheticSpec {
        let mut spec = self.data.clone();
        if let Some(cap) = self.train.max_len {
            spec.length = spec.length.min(cap);
        }
        spec
    }

    /// Held-out data: same distribution, different seed.
    pub fn eval_data(&self) -> Result<SyntheticSpec> {
        if self.eval.seed == self.data.seed {
            return Err(Error::Config(
                "eval.seed must differ from data.seed for held-out evaluation".into(),
            ));
        }
        Ok(SyntheticSpec {
            seed: self.eval.seed,
            ..self.data.clone()
        })
    }

    /// Every resolved setting, defaults included.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.model.to_kv();
        let t = &self.train;
        kv.insert("train.steps", t.steps);
        kv.insert("train.lr", format!("{:e}", t.adam.lr));
        kv.insert("train.beta1", t.adam.beta1);
        kv.insert("train.beta2", t.adam.beta2);
        kv.insert("train.eps", format!("{:e}", t.adam.eps));
        kv.insert("train.mixtures", t.mixtures);
        kv.insert("train.batch", t.batch);
        kv.insert("train.precision", t.precision);
        if let Some(m) = t.max_len {
            kv.insert("train.max_len", m);
        }
        kv.insert("train.log_every", t.log_every);
        let d = &self.data;
        match d.kind {
            SourceKind::Sinusoid => kv.insert("data.kind", "sinusoid"),
            SourceKind::NoiseBand(n) => {
                kv.insert("data.kind", "noise");
                kv.insert("data.components", n);
            }
        }
        kv.insert("data.length", d.length);
        let bands: Vec<String> = d.bands.iter().map(|(a, b)| format!("{a}-{b}")).collect();
        kv.insert("data.bands", bands.join(","));
        kv.insert("data.snr_min", d.snr_db.0);
        kv.insert("data.snr_max", d.snr_db.1);
        kv.insert("data.seed", d.seed);
        kv.insert("eval.mixtures", self.eval.mixtures);
        kv.insert("eval.seed", self.eval.seed);
        let g = &self.grad_check;
        kv.insert("gradcheck.coords", g.coords);
        kv.insert("gradcheck.threshold", format!("{:e}", g.threshold));
        kv.insert("gradcheck.length", g.length);
        kv.insert("gradcheck.seed", g.seed);
        kv.insert("gradcheck.step", format!("{:e}", g.step));
        kv
    }

    /// SHA-256 of the resolved settings. Output location and resume source
    /// are excluded so a resumed run hashes like the original.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().render().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
