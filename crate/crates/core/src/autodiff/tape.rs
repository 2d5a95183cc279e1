//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! Every op records its inputs (and whatever it needs from the forward pass)
//! so that [`Tape::backward`] can walk the tape once in reverse. Parameters
//! are leaves that point into a [`ParamStore`]; using the same parameter at
//! several places in a graph accumulates its gradient.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use crate::chunking::ChunkPlan;
use crate::error::{dim_err, Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct MhaCache<T> {
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    ctx: Vec<T>,
    attn: Tensor<T>,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        k: Var,
        stride: usize,
    },
    ConvTranspose1d {
        x: Var,
        k: Var,
        stride: usize,
    },
    Depthwise {
        x: Var,
        k: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Mha(Box<MhaCache<T>>),
    Relu(Var),
    Prelu {
        x: Var,
        a: Var,
    },
    Softmax(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Segment {
        x: Var,
        plan: ChunkPlan,
    },
    OverlapAdd {
        x: Var,
        plan: ChunkPlan,
    },
    SiSnr {
        est: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
}

pub struct Tape<'a, T: Scalar> {
    params: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Split a shape around `axis` into (outer, extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => &self.params.get(id).value,
            _ => node.value.as_ref().expect("non-parameter node stores its value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Attention weights `[B, heads, T, T]` recorded by a
    /// [`Tape::multi_head_attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&Tensor<T>> {
        match &self.nodes[v.0].op {
            Op::Mha(cache) => Some(&cache.attn),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        self.push(y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        self.push(y, Op::Sub(a, b), "sub")
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        self.push(y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, alpha: T) -> Result<Var> {
        let y = self.value(a).scale(alpha);
        self.push(y, Op::Scale(a, alpha), "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, Op::Sum(a), "sum")
    }

    /// `y[..., j] = sum_i x[..., i] * w[i, j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.rank() != 2 || xv.rank() == 0 || xv.last_dim() != wv.shape()[0] {
            return dim_err(
                "linear",
                format!("x {:?} with w {:?}", xv.shape(), wv.shape()),
            );
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        let m = xv.rows();
        let mut out = vec![T::zero(); m * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return dim_err("linear", format!("bias {:?} for {} outputs", bv.shape(), dout));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm_acc(xv.data(), wv.data(), &mut out, m, din, dout);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let y = Tensor::new(shape, out)?;
        self.push(y, Op::Linear { x, w, b }, "linear")
    }

    /// Valid cross-correlation: x `[C_in, T]`, k `[C_out, C_in, L]`.
    pub fn conv1d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let xv = self.value(x);
        let kv = self.value(k);
        if xv.rank() != 2 || kv.rank() != 3 || kv.shape()[1] != xv.shape()[0] {
            return dim_err("conv1d", format!("x {:?} k {:?}", xv.shape(), kv.shape()));
        }
        let (cin, t) = (xv.shape()[0], xv.shape()[1]);
        let (cout, l) = (kv.shape()[0], kv.shape()[2]);
        if t < l {
            return Err(Error::InputTooShort {
                required: l,
                got: t,
            });
        }
        let tout = (t - l) / stride + 1;
        let (xd, kd) = (xv.data(), kv.data());
        let mut out = vec![T::zero(); cout * tout];
        for o in 0..cout {
            for i in 0..cin {
                let krow = &kd[(o * cin + i) * l..(o * cin + i + 1) * l];
                let xrow = &xd[i * t..(i + 1) * t];
                for (tt, y) in out[o * tout..(o + 1) * tout].iter_mut().enumerate() {
                    let base = tt * stride;
                    let mut acc = T::zero();
                    for (kk, &w) in krow.iter().enumerate() {
                        acc += w * xrow[base + kk];
                    }
                    *y += acc;
                }
            }
        }
        let y = Tensor::new(vec![cout, tout], out)?;
        self.push(y, Op::Conv1d { x, k, stride }, "conv1d")
    }

    /// Adjoint of [`Tape::conv1d`]: x `[C_in, T]`, k `[C_in, C_out, L]`,
    /// output `[C_out, (T - 1) * stride + L]`.
    pub fn conv_transpose1d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let xv = self.value(x);
        let kv = self.value(k);
        if xv.rank() != 2 || kv.rank() != 3 || kv.shape()[0] != xv.shape()[0] || xv.shape()[1] == 0
        {
            return dim_err(
                "conv_transpose1d",
                format!("x {:?} k {:?}", xv.shape(), kv.shape()),
            );
        }
        let (cin, t) = (xv.shape()[0], xv.shape()[1]);
        let (cout, l) = (kv.shape()[1], kv.shape()[2]);
        let tout = (t - 1) * stride + l;
        let (xd, kd) = (xv.data(), kv.data());
        let mut out = vec![T::zero(); cout * tout];
        for i in 0..cin {
            for o in 0..cout {
                let krow = &kd[(i * cout + o) * l..(i * cout + o + 1) * l];
                let yrow = &mut out[o * tout..(o + 1) * tout];
                for tt in 0..t {
                    let xval = xd[i * t + tt];
                    let base = tt * stride;
                    for (kk, &w) in krow.iter().enumerate() {
                        yrow[base + kk] += w * xval;
                    }
                }
            }
        }
        let y = Tensor::new(vec![cout, tout], out)?;
        self.push(y, Op::ConvTranspose1d { x, k, stride }, "conv_transpose1d")
    }

    /// Per-channel "same" convolution along the frame axis of a channel-last
    /// tensor `[..., T, C]` with kernels `[C, L]`, `L` odd.
    pub fn depthwise_conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(k);
        if xv.rank() < 2 || kv.rank() != 2 || kv.shape()[0] != xv.last_dim() {
            return dim_err(
                "depthwise_conv1d",
                format!("x {:?} k {:?}", xv.shape(), kv.shape()),
            );
        }
        let l = kv.shape()[1];
        if l % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel length must be odd, got {l}"
            )));
        }
        let r = xv.rank();
        let (t, ch) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let batch = xv.len() / (t * ch).max(1);
        let pad = (l - 1) / 2;
        let (xd, kd) = (xv.data(), kv.data());
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            let base = b * t * ch;
            for tt in 0..t {
                for kk in 0..l {
                    let src = tt as isize + kk as isize - pad as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    let src = src as usize;
                    for cc in 0..ch {
                        out[base + tt * ch + cc] += kd[cc * l + kk] * xd[base + src * ch + cc];
                    }
                }
            }
        }
        let y = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(y, Op::Depthwise { x, k }, "depthwise_conv1d")
    }

    /// Normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [d] || bv.shape() != [d] || d == 0 {
            return dim_err(
                "layer_norm",
                format!("x {:?} gamma {:?} beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            );
        }
        let rows = xv.rows();
        let dn = T::from_count(d);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let y = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Multi-head self-attention without masking or bias terms over
    /// `x: [B, T, D]`; projections are `[D, D]` in `x @ W` orientation.
    pub fn multi_head_attention(
        &mut self,
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        heads: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return dim_err("attention", format!("expected [B, T, D], got {:?}", xv.shape()));
        }
        let (b, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide attention width {d}"
            )));
        }
        for w in [wq, wk, wv, wo] {
            if self.value(w).shape() != [d, d] {
                return dim_err(
                    "attention",
                    format!("projection {:?} for width {}", self.value(w).shape(), d),
                );
            }
        }
        let m = b * t;
        let project = |w: Var| {
            let mut out = vec![T::zero(); m * d];
            gemm_acc(xv.data(), self.value(w).data(), &mut out, m, d, d);
            out
        };
        let (q, k, v) = (project(wq), project(wk), project(wv));
        let dh = d / heads;
        let scale = T::one() / T::from_count(dh).sqrt();
        let mut attn = vec![T::zero(); b * heads * t * t];
        let mut ctx = vec![T::zero(); m * d];
        let mut scores = vec![T::zero(); t];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &q[(bi * t + i) * d + off..(bi * t + i) * d + off + dh];
                    let mut max = T::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &k[(bi * t + j) * d + off..(bi * t + j) * d + off + dh];
                        let mut acc = T::zero();
                        for (&a, &bb) in qi.iter().zip(kj) {
                            acc += a * bb;
                        }
                        *s = acc * scale;
                        max = max.max(*s);
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let arow = &mut attn[((bi * heads + h) * t + i) * t..((bi * heads + h) * t + i + 1) * t];
                    for (a, &s) in arow.iter_mut().zip(&scores) {
                        *a = s / z;
                    }
                    let crow = &mut ctx[(bi * t + i) * d + off..(bi * t + i) * d + off + dh];
                    for (j, &a) in arow.iter().enumerate() {
                        let vj = &v[(bi * t + j) * d + off..(bi * t + j) * d + off + dh];
                        for (cv, &vv) in crow.iter_mut().zip(vj) {
                            *cv += a * vv;
                        }
                    }
                }
            }
        }
        let mut out = vec![T::zero(); m * d];
        gemm_acc(&ctx, self.value(wo).data(), &mut out, m, d, d);
        let y = Tensor::new(vec![b, t, d], out)?;
        let attn = Tensor::new(vec![b, heads, t, t], attn)?;
        self.push(
            y,
            Op::Mha(Box::new(MhaCache {
                x,
                wq,
                wk,
                wv,
                wo,
                heads,
                q,
                k,
                v,
                ctx,
                attn,
            })),
            "multi_head_attention",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu(x), "relu")
    }

    /// Parametric ReLU with a single learnable slope `a` of shape `[1]`.
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.len() != 1 {
            return dim_err("prelu", format!("slope shape {:?}", av.shape()));
        }
        let slope = av.data()[0];
        let y = self.value(x).map(|v| if v > T::zero() { v } else { slope * v });
        self.push(y, Op::Prelu { x, a }, "prelu")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return dim_err("softmax", "axis out of range for a scalar");
        }
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let y = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(y, Op::Softmax(x), "softmax")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return dim_err("concat", format!("axis {} for rank {}", axis, first.len()));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return dim_err("concat", format!("{:?} vs {:?}", first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let ext = pv.shape()[axis];
                out.extend_from_slice(&pv.data()[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let y = Tensor::new(shape, out)?;
        self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || start + len > xv.shape()[axis] {
            return dim_err(
                "narrow",
                format!("[{}, {}) on axis {} of {:?}", start, start + len, axis, xv.shape()),
            );
        }
        let (outer, ext, inner) = axis_split(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let y = Tensor::new(shape, out)?;
        self.push(y, Op::Narrow { x, axis, start }, "narrow")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = self.value(x).permute(perm)?;
        self.push(
            y,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            "permute",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push(y, Op::Reshape(x), "reshape")
    }

    /// `[frames, D]` -> `[chunks, S, D]`.
    pub fn segment(&mut self, x: Var, plan: ChunkPlan) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[0] != plan.frames {
            return dim_err("segment", format!("{:?} for {:?}", xv.shape(), plan));
        }
        let d = xv.shape()[1];
        let y = Tensor::new(vec![plan.chunks, plan.chunk, d], plan.segment_raw(xv.data(), d))?;
        self.push(y, Op::Segment { x, plan }, "segment")
    }

    /// `[chunks, S, D]` -> `[frames, D]`.
    pub fn overlap_add(&mut self, x: Var, plan: ChunkPlan) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.shape()[0] != plan.chunks || xv.shape()[1] != plan.chunk {
            return dim_err("overlap_add", format!("{:?} for {:?}", xv.shape(), plan));
        }
        let d = xv.shape()[2];
        let y = Tensor::new(vec![plan.frames, d], plan.overlap_add_raw(xv.data(), d))?;
        self.push(y, Op::OverlapAdd { x, plan }, "overlap_add")
    }

    /// Scale-invariant SNR in dB of `est` against a constant target of the
    /// same length. With `zero_mean` both signals are mean-subtracted first.
    pub fn si_snr(&mut self, est: Var, target: &[T], eps: T, zero_mean: bool) -> Result<Var> {
        let ev = self.value(est);
        if ev.len() != target.len() || target.is_empty() {
            return Err(Error::Contract(format!(
                "si_snr length mismatch: {} vs {}",
                ev.len(),
                target.len()
            )));
        }
        let (val, grad) = si_snr_with_grad(ev.data(), target, eps, zero_mean);
        self.push(Tensor::scalar(val), Op::SiSnr { est, grad }, "si_snr")
    }

    /// Gradients of scalar `loss` with respect to every parameter in the
    /// store, in store order; parameters not reached get zeros.
    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor<T>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut param_grads: Vec<Tensor<T>> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads, &mut param_grads)?;
        }
        Ok(param_grads)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        param_grads: &mut [Tensor<T>],
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(id) => param_grads[id.0].add_assign(&g),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.scale(-T::one()));
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b))?;
                let gb = g.mul(self.value(*a))?;
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, alpha) => acc(*a, g.scale(*alpha)),
            Op::Sum(a) => {
                let s = gd[0];
                acc(*a, Tensor::full(self.shape(*a), s));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.rows();
                let mut gx = vec![T::zero(); m * din];
                gemm_a_bt_acc(gd, wv.data(), &mut gx, m, dout, din);
                let mut gw = vec![T::zero(); din * dout];
                gemm_at_b_acc(xv.data(), gd, &mut gw, m, din, dout);
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(*b, Tensor::new(vec![dout], gb)?);
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), gx)?);
                acc(*w, Tensor::new(wv.shape().to_vec(), gw)?);
            }
            Op::Conv1d { x, k, stride } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let (cin, t) = (xv.shape()[0], xv.shape()[1]);
                let (cout, l) = (kv.shape()[0], kv.shape()[2]);
                let tout = g.shape()[1];
                let mut gx = vec![T::zero(); cin * t];
                let mut gk = vec![T::zero(); cout * cin * l];
                for o in 0..cout {
                    for ci in 0..cin {
                        let kb = (o * cin + ci) * l;
                        for tt in 0..tout {
                            let gy = gd[o * tout + tt];
                            let base = ci * t + tt * stride;
                            for kk in 0..l {
                                gx[base + kk] += kv.data()[kb + kk] * gy;
                                gk[kb + kk] += xv.data()[base + kk] * gy;
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), gx)?);
                acc(*k, Tensor::new(kv.shape().to_vec(), gk)?);
            }
            Op::ConvTranspose1d { x, k, stride } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let (cin, t) = (xv.shape()[0], xv.shape()[1]);
                let (cout, l) = (kv.shape()[1], kv.shape()[2]);
                let tout = g.shape()[1];
                let mut gx = vec![T::zero(); cin * t];
                let mut gk = vec![T::zero(); cin * cout * l];
                for ci in 0..cin {
                    for o in 0..cout {
                        let kb = (ci * cout + o) * l;
                        for tt in 0..t {
                            let base = o * tout + tt * stride;
                            let xval = xv.data()[ci * t + tt];
                            let mut sx = T::zero();
                            for kk in 0..l {
                                sx += kv.data()[kb + kk] * gd[base + kk];
                                gk[kb + kk] += xval * gd[base + kk];
                            }
                            gx[ci * t + tt] += sx;
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), gx)?);
                acc(*k, Tensor::new(kv.shape().to_vec(), gk)?);
            }
            Op::Depthwise { x, k } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let r = xv.rank();
                let (t, ch) = (xv.shape()[r - 2], xv.shape()[r - 1]);
                let l = kv.shape()[1];
                let pad = (l - 1) / 2;
                let batch = xv.len() / (t * ch).max(1);
                let mut gx = vec![T::zero(); xv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                for b in 0..batch {
                    let base = b * t * ch;
                    for tt in 0..t {
                        for kk in 0..l {
                            let src = tt as isize + kk as isize - pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let src = src as usize;
                            for cc in 0..ch {
                                let gy = gd[base + tt * ch + cc];
                                gx[base + src * ch + cc] += kv.data()[cc * l + kk] * gy;
                                gk[cc * l + kk] += xv.data()[base + src * ch + cc] * gy;
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), gx)?);
                acc(*k, Tensor::new(kv.shape().to_vec(), gk)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let d = gv.len();
                let dn = T::from_count(d);
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gy = &gd[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        gg[j] += gy[j] * xh[j];
                        gb[j] += gy[j];
                        dxhat[j] = gy[j] * gv.data()[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xh[j];
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for j in 0..d {
                        gx[r * d + j] = is * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), gx)?);
                acc(*gamma, Tensor::new(vec![d], gg)?);
                acc(*beta, Tensor::new(vec![d], gb)?);
            }
            Op::Mha(cache) => self.backprop_mha(cache, gd, &mut acc)?,
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gy)| if v > T::zero() { gy } else { T::zero() })
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::Prelu { x, a } => {
                let xv = self.value(*x);
                let slope = self.value(*a).data()[0];
                let mut ga = T::zero();
                let gx = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gy)| {
                        if v > T::zero() {
                            gy
                        } else {
                            ga += gy * v;
                            slope * gy
                        }
                    })
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), gx)?);
                acc(*a, Tensor::new(self.shape(*a).to_vec(), vec![ga])?);
            }
            Op::Softmax(x) => {
                let y = self.value(Var(i));
                let d = y.last_dim().max(1);
                let mut gx = vec![T::zero(); y.len()];
                for ((gxr, yr), gyr) in gx.chunks_mut(d).zip(y.data().chunks(d)).zip(gd.chunks(d)) {
                    let dot: T = yr.iter().zip(gyr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gxr[j] = yr[j] * (gyr[j] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let ext = shape[*axis];
                    let mut gp = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&gd[base..base + ext * inner]);
                    }
                    offset += ext;
                    acc(p, Tensor::new(shape, gp)?);
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, ext, inner) = axis_split(&shape, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, Tensor::new(shape, gx)?);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*x, g.permute(&inv)?);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                acc(*x, g.reshape(&shape)?);
            }
            Op::Segment { x, plan } => {
                let d = g.shape()[2];
                acc(
                    *x,
                    Tensor::new(vec![plan.frames, d], plan.segment_adjoint(gd, d))?,
                );
            }
            Op::OverlapAdd { x, plan } => {
                let d = g.shape()[1];
                acc(
                    *x,
                    Tensor::new(
                        vec![plan.chunks, plan.chunk, d],
                        plan.overlap_add_adjoint(gd, d),
                    )?,
                );
            }
            Op::SiSnr { est, grad } => {
                let s = gd[0];
                let shape = self.shape(*est).to_vec();
                acc(*est, Tensor::new(shape, grad.iter().map(|&v| v * s).collect())?);
            }
        }
        Ok(())
    }

    fn backprop_mha(
        &self,
        cache: &MhaCache<T>,
        gd: &[T],
        acc: &mut impl FnMut(Var, Tensor<T>),
    ) -> Result<()> {
        let xv = self.value(cache.x);
        let (b, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let m = b * t;
        let heads = cache.heads;
        let dh = d / heads;
        let scale = T::one() / T::from_count(dh).sqrt();
        let wo = self.value(cache.wo);

        let mut gwo = vec![T::zero(); d * d];
        gemm_at_b_acc(&cache.ctx, gd, &mut gwo, m, d, d);
        let mut gctx = vec![T::zero(); m * d];
        gemm_a_bt_acc(gd, wo.data(), &mut gctx, m, d, d);

        let (q, k, v) = (&cache.q, &cache.k, &cache.v);
        let attn = cache.attn.data();
        let mut gq = vec![T::zero(); m * d];
        let mut gk = vec![T::zero(); m * d];
        let mut gv = vec![T::zero(); m * d];
        let mut da = vec![T::zero(); t];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let arow = &attn[((bi * heads + h) * t + i) * t..((bi * heads + h) * t + i + 1) * t];
                    let gc = &gctx[(bi * t + i) * d + off..(bi * t + i) * d + off + dh];
                    let mut dot = T::zero();
                    for j in 0..t {
                        let vr = (bi * t + j) * d + off;
                        let mut s = T::zero();
                        for e in 0..dh {
                            s += gc[e] * v[vr + e];
                            gv[vr + e] += arow[j] * gc[e];
                        }
                        da[j] = s;
                        dot += s * arow[j];
                    }
                    let qr = (bi * t + i) * d + off;
                    for j in 0..t {
                        let ds = arow[j] * (da[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kr = (bi * t + j) * d + off;
                        for e in 0..dh {
                            gq[qr + e] += ds * k[kr + e];
                            gk[kr + e] += ds * q[qr + e];
                        }
                    }
                }
            }
        }

        let mut gx = vec![T::zero(); m * d];
        for (w, gp) in [(cache.wq, &gq), (cache.wk, &gk), (cache.wv, &gv)] {
            gemm_a_bt_acc(gp, self.value(w).data(), &mut gx, m, d, d);
            let mut gw = vec![T::zero(); d * d];
            gemm_at_b_acc(xv.data(), gp, &mut gw, m, d, d);
            acc(w, Tensor::new(vec![d, d], gw)?);
        }
        acc(cache.wo, Tensor::new(vec![d, d], gwo)?);
        acc(cache.x, Tensor::new(xv.shape().to_vec(), gx)?);
        Ok(())
    }
}

/// SI-SNR value in dB and its gradient with respect to `est`.
pub(crate) fn si_snr_with_grad<T: Scalar>(
    est: &[T],
    target: &[T],
    eps: T,
    zero_mean: bool,
) -> (T, Vec<T>) {
    let n = T::from_count(est.len());
    let centre = |x: &[T]| -> Vec<T> {
        if zero_mean {
            let mean = x.iter().copied().sum::<T>() / n;
            x.iter().map(|&v| v - mean).collect()
        } else {
            x.to_vec()
        }
    };
    let e = centre(est);
    let t = centre(target);
    let tt: T = t.iter().map(|&v| v * v).sum();
    let et: T = e.iter().zip(&t).map(|(&a, &b)| a * b).sum();
    let denom_t = tt + eps;
    let alpha = et / denom_t;
    let noise: Vec<T> = e.iter().zip(&t).map(|(&a, &b)| a - alpha * b).collect();
    let num = alpha * alpha * tt + eps;
    let den: T = noise.iter().map(|&v| v * v).sum::<T>() + eps;
    let value = c::<T>(10.0) * (num / den).log10();

    let kdb = c::<T>(10.0) / c::<T>(std::f64::consts::LN_10);
    let nt: T = noise.iter().zip(&t).map(|(&a, &b)| a * b).sum();
    let two = c::<T>(2.0);
    let coef_t = two * alpha * tt / (denom_t * num) + two * nt / (denom_t * den);
    let mut grad: Vec<T> = noise
        .iter()
        .zip(&t)
        .map(|(&nv, &tv)| kdb * (coef_t * tv - two * nv / den))
        .collect();
    if zero_mean {
        let mean = grad.iter().copied().sum::<T>() / n;
        for gv in &mut grad {
            *gv -= mean;
        }
    }
    (value, grad)
}
