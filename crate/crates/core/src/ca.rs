//! Convolution-Attention layers and the dual-path (intra-chunk, then
//! inter-chunk) block built from them.
//!
//! A layer splits its `D` channels into a separable-convolution path
//! (`d_conv` leading channels) and a multi-head-attention path (`d_attn`
//! trailing channels). Each path has its own residual connection and layer
//! norm; the paths are concatenated back in split order and passed through a
//! ReLU feed-forward network with a final residual + layer norm.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::config::CaConfig;
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[d], T::one()))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, eps: T) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b, eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (1.0 / d_in as f64).sqrt();
        let weight = store.add(
            format!("{prefix}.w"),
            Tensor::uniform(&[d_in, d_out], bound, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm: NormParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    /// `[d_conv, kernel]`
    pub depthwise: ParamId,
    pub pointwise: LinearParams,
    pub norm: NormParams,
}

/// Parameters of one CA layer. A path whose channel count is zero owns no
/// parameters.
#[derive(Clone, Debug)]
pub struct CaLayer {
    pub config: CaConfig,
    pub attention: Option<AttentionParams>,
    pub conv: Option<ConvParams>,
    pub ff_in: LinearParams,
    pub ff_out: LinearParams,
    pub norm: NormParams,
}

impl CaLayer {
    pub fn new<T: Scalar, R: Rng>(
        config: CaConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.width();
        config.validate(d)?;
        let conv = if config.d_conv > 0 {
            let dc = config.d_conv;
            let bound = (1.0 / config.kernel as f64).sqrt();
            Some(ConvParams {
                depthwise: store.add(
                    format!("{prefix}.conv.depthwise"),
                    Tensor::uniform(&[dc, config.kernel], bound, rng),
                )?,
                pointwise: LinearParams::new(store, &format!("{prefix}.conv.pointwise"), dc, dc, true, rng)?,
                norm: NormParams::new(store, &format!("{prefix}.conv.norm"), dc)?,
            })
        } else {
            None
        };
        let attention = if config.d_attn > 0 {
            let da = config.d_attn;
            let bound = (1.0 / da as f64).sqrt();
            let mut proj = |name: &str| {
                store.add(
                    format!("{prefix}.attn.{name}"),
                    Tensor::uniform(&[da, da], bound, rng),
                )
            };
            let (wq, wk, wv, wo) = (proj("wq")?, proj("wk")?, proj("wv")?, proj("wo")?);
            Some(AttentionParams {
                wq,
                wk,
                wv,
                wo,
                norm: NormParams::new(store, &format!("{prefix}.attn.norm"), da)?,
            })
        } else {
            None
        };
        Ok(Self {
            config,
            attention,
            conv,
            ff_in: LinearParams::new(store, &format!("{prefix}.ff.fc1"), d, config.d_ff, true, rng)?,
            ff_out: LinearParams::new(store, &format!("{prefix}.ff.fc2"), config.d_ff, d, true, rng)?,
            norm: NormParams::new(store, &format!("{prefix}.norm"), d)?,
        })
    }

    /// `[B, T, D]` -> same shape. Returns the attention node (if any) so
    /// callers can read its weights.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        h: Var,
        eps: f64,
    ) -> Result<(Var, Option<Var>)> {
        let eps = c::<T>(eps);
        let (hc, ha) = channel_split(tape, h, self.config.d_conv, self.config.d_attn)?;
        let mut parts = Vec::with_capacity(2);
        let mut attn_node = None;
        if let (Some(p), Some(hc)) = (&self.conv, hc) {
            parts.push(conv_path(tape, p, hc, eps)?);
        }
        if let (Some(p), Some(ha)) = (&self.attention, ha) {
            let (out, node) = attention_path(tape, p, ha, self.config.heads, eps)?;
            attn_node = Some(node);
            parts.push(out);
        }
        let fused = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, 2)?
        };
        let f = self.ff_in.apply(tape, fused)?;
        let f = tape.relu(f)?;
        let f = self.ff_out.apply(tape, f)?;
        let r = tape.add(f, fused)?;
        Ok((self.norm.apply(tape, r, eps)?, attn_node))
    }
}

/// Leading `d_conv` channels and trailing `d_attn` channels of `[B, T, D]`.
/// An empty side is returned as `None`.
pub fn channel_split<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    d_conv: usize,
    d_attn: usize,
) -> Result<(Option<Var>, Option<Var>)> {
    let d = tape.shape(h).last().copied().unwrap_or(0);
    if d_conv + d_attn != d {
        return Err(Error::Config(format!(
            "channel split {d_conv} + {d_attn} does not equal width {d}"
        )));
    }
    let axis = tape.shape(h).len() - 1;
    let hc = if d_conv > 0 {
        Some(tape.narrow(h, axis, 0, d_conv)?)
    } else {
        None
    };
    let ha = if d_attn > 0 {
        Some(tape.narrow(h, axis, d_conv, d_attn)?)
    } else {
        None
    };
    Ok((hc, ha))
}

/// `LayerNorm(MHA(x) + x)`; also returns the attention node.
pub fn attention_path<T: Scalar>(
    tape: &mut Tape<T>,
    p: &AttentionParams,
    x: Var,
    heads: usize,
    eps: T,
) -> Result<(Var, Var)> {
    let (wq, wk, wv, wo) = (
        tape.param(p.wq),
        tape.param(p.wk),
        tape.param(p.wv),
        tape.param(p.wo),
    );
    let a = tape.multi_head_attention(x, wq, wk, wv, wo, heads)?;
    let r = tape.add(a, x)?;
    Ok((p.norm.apply(tape, r, eps)?, a))
}

/// `LayerNorm(Pointwise(Depthwise(x)) + x)` along the frame axis.
pub fn conv_path<T: Scalar>(tape: &mut Tape<T>, p: &ConvParams, x: Var, eps: T) -> Result<Var> {
    let k = tape.param(p.depthwise);
    let d = tape.depthwise_conv1d(x, k)?;
    let pw = p.pointwise.apply(tape, d)?;
    let r = tape.add(pw, x)?;
    p.norm.apply(tape, r, eps)
}

/// Which sub-network of a dual block an attention map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    Intra,
    Inter,
}

impl std::fmt::Display for Path {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Path::Intra => "intra",
            Path::Inter => "inter",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionRecord {
    pub block: usize,
    pub path: Path,
    pub iteration: usize,
    pub node: Var,
}

/// One IntraCA network followed by one InterCA network. With sharing each
/// network holds a single layer that is applied at every iteration.
#[derive(Clone, Debug)]
pub struct DualBlock {
    pub intra: Vec<CaLayer>,
    pub inter: Vec<CaLayer>,
    pub n_intra: usize,
    pub n_inter: usize,
}

pub struct DualBlockSpec {
    pub intra: CaConfig,
    pub inter: CaConfig,
    pub n_intra: usize,
    pub n_inter: usize,
    pub shared: bool,
}

impl DualBlock {
    pub fn new<T: Scalar, R: Rng>(
        spec: &DualBlockSpec,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let build = |cfg: CaConfig, n: usize, name: &str, store: &mut ParamStore<T>, rng: &mut R| {
            let sets = if spec.shared { 1 } else { n };
            (0..sets)
                .map(|i| CaLayer::new(cfg, store, &format!("{prefix}.{name}[{i}]"), rng))
                .collect::<Result<Vec<_>>>()
        };
        let intra = build(spec.intra, spec.n_intra, "intra", store, rng)?;
        let inter = build(spec.inter, spec.n_inter, "inter", store, rng)?;
        Ok(Self {
            intra,
            inter,
            n_intra: spec.n_intra,
            n_inter: spec.n_inter,
        })
    }

    fn layer(layers: &[CaLayer], i: usize) -> &CaLayer {
        &layers[i.min(layers.len() - 1)]
    }

    /// `[T_S, S, D]` -> `[T_S, S, D]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        chunks: Var,
        eps: f64,
        block: usize,
        trace: &mut Vec<AttentionRecord>,
    ) -> Result<Var> {
        let mut h = chunks;
        for i in 0..self.n_intra {
            let (out, node) = Self::layer(&self.intra, i).forward(tape, h, eps)?;
            if let Some(node) = node {
                trace.push(AttentionRecord {
                    block,
                    path: Path::Intra,
                    iteration: i,
                    node,
                });
            }
            h = out;
        }
        h = tape.permute(h, &[1, 0, 2])?;
        for i in 0..self.n_inter {
            let (out, node) = Self::layer(&self.inter, i).forward(tape, h, eps)?;
            if let Some(node) = node {
                trace.push(AttentionRecord {
                    block,
                    path: Path::Inter,
                    iteration: i,
                    node,
                });
            }
            h = out;
        }
        tape.permute(h, &[1, 0, 2])
    }
}
