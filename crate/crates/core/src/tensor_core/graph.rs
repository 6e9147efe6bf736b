//! Recorded forward graph with per-layer backward rules.
//!
//! Every layer application appends a node holding whatever it needs for the
//! backward pass. [`Graph::backward`] walks the nodes in exact reverse order
//! and may run once; a second call fails with [`Error::GraphConsumed`].
//! Gradients are only computed for values that (transitively) depend on a
//! leaf registered with `requires_grad`, so frozen parameters cost nothing.

use std::cell::Cell;

use super::kernels::{axpy, dot, normal_cdf, normal_pdf, shifted_axpy, shifted_dot, sigmoid};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Gelu,
    Relu,
}

/// Identifies a backward rule; used by reports and the corruption hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    DepthwiseConv,
    DenseConv,
    PointwiseConv,
    PatchConv,
    PatchConvTranspose,
    Linear,
    Sigmoid,
    Gelu,
    Relu,
    Add,
    Mul,
    LayerNorm,
    SelfAttention,
    PatchDct,
    AvgPool,
    ToTokens,
    FromTokens,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::DepthwiseConv,
        OpKind::DenseConv,
        OpKind::PointwiseConv,
        OpKind::PatchConv,
        OpKind::PatchConvTranspose,
        OpKind::Linear,
        OpKind::Sigmoid,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::Add,
        OpKind::Mul,
        OpKind::LayerNorm,
        OpKind::SelfAttention,
        OpKind::PatchDct,
        OpKind::AvgPool,
        OpKind::ToTokens,
        OpKind::FromTokens,
    ];
}

thread_local! {
    static CORRUPTED: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Runs `f` with the backward rule of `kind` deliberately scaled by 1.5 on
/// the current thread. Exists so the gradient harness can prove it detects a
/// broken rule.
#[doc(hidden)]
pub fn with_corrupted_backward<R>(kind: OpKind, f: impl FnOnce() -> R) -> R {
    let prev = CORRUPTED.with(|c| c.replace(Some(kind)));
    let out = f();
    CORRUPTED.with(|c| c.set(prev));
    out
}

enum Op {
    DepthwiseConv { x: Var, kernel: Var, bias: Var },
    DenseConv { x: Var, weight: Var, bias: Var },
    PointwiseConv { x: Var, weight: Var, bias: Var },
    PatchConv { x: Var, weight: Var, bias: Var, stride: usize },
    PatchConvTranspose { x: Var, weight: Var, bias: Var, stride: usize },
    Linear { x: Var, weight: Var, bias: Var },
    Activation { x: Var, kind: Activation },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    SelfAttention { qkv: Var, heads: usize, probs: Vec<f64> },
    PatchDct { x: Var, patch: usize, bases: Vec<Vec<f64>> },
    AvgPool { x: Var, fh: usize, fw: usize },
    ToTokens { x: Var },
    FromTokens { x: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::DepthwiseConv { .. } => OpKind::DepthwiseConv,
            Op::DenseConv { .. } => OpKind::DenseConv,
            Op::PointwiseConv { .. } => OpKind::PointwiseConv,
            Op::PatchConv { .. } => OpKind::PatchConv,
            Op::PatchConvTranspose { .. } => OpKind::PatchConvTranspose,
            Op::Linear { .. } => OpKind::Linear,
            Op::Activation { kind, .. } => match kind {
                Activation::Sigmoid => OpKind::Sigmoid,
                Activation::Gelu => OpKind::Gelu,
                Activation::Relu => OpKind::Relu,
            },
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SelfAttention { .. } => OpKind::SelfAttention,
            Op::PatchDct { .. } => OpKind::PatchDct,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::ToTokens { .. } => OpKind::ToTokens,
            Op::FromTokens { .. } => OpKind::FromTokens,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::DepthwiseConv { x, kernel, bias } => vec![x, kernel, bias],
            Op::DenseConv { x, weight, bias }
            | Op::PointwiseConv { x, weight, bias }
            | Op::PatchConv { x, weight, bias, .. }
            | Op::PatchConvTranspose { x, weight, bias, .. }
            | Op::Linear { x, weight, bias } => vec![x, weight, bias],
            Op::Activation { x, .. } => vec![x],
            Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::SelfAttention { qkv, .. } => vec![qkv],
            Op::PatchDct { x, .. } | Op::AvgPool { x, .. } | Op::ToTokens { x } | Op::FromTokens { x } => vec![x],
        }
    }
}

struct Node {
    op: Op,
    out: Var,
}

struct Slot {
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    slots: Vec<Slot>,
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    consumed: bool,
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    /// Trainable parameters with their shapes.
    params: Vec<(String, Var, [usize; 4])>,
    order: Vec<usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: &str) -> Option<&Tensor> {
        self.params.iter().find(|(pid, _, _)| pid == id).and_then(|(_, v, _)| self.wrt(*v))
    }

    /// Gradients of trainable parameters, in registration order. Parameters
    /// that did not influence the output receive explicit zeros.
    pub fn into_param_grads(mut self) -> Vec<(String, Tensor)> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .map(|(id, v, shape)| {
                let g = self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape));
                (id, g)
            })
            .collect()
    }

    /// Node indices in the order the backward pass visited them.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

fn bias_len(op: &'static str, b: &Tensor, expected: usize) -> Result<()> {
    if b.shape() != [1, 1, 1, expected] {
        return Err(Error::ShapeMismatch { op, expected: vec![1, 1, 1, expected], got: b.shape().to_vec() });
    }
    Ok(())
}

fn odd(op: &'static str, size: usize) -> Result<()> {
    if size.is_multiple_of(2) {
        return Err(Error::EvenKernel { op, size });
    }
    Ok(())
}

fn divisible(op: &'static str, what: &'static str, value: usize, divisor: usize) -> Result<()> {
    if divisor == 0 || !value.is_multiple_of(divisor) {
        return Err(Error::Indivisible { op, what, value, divisor });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.slots.push(Slot { value, requires_grad });
        Var(self.slots.len() - 1)
    }

    /// Registers a parameter leaf; its gradient is reported under `id`.
    pub fn param(&mut self, id: impl Into<String>, value: Tensor, trainable: bool) -> Var {
        let v = self.input(value, trainable);
        self.params.push((id.into(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.slots[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let requires_grad = op.inputs().iter().any(|v| self.slots[v.0].requires_grad);
        self.slots.push(Slot { value, requires_grad });
        let out = Var(self.slots.len() - 1);
        self.nodes.push(Node { op, out });
        Ok(out)
    }

    /// Per-channel `kh x kw` convolution with zero "same" padding.
    /// `kernel` is `[C, 1, kh, kw]`, `bias` a length-`C` vector.
    pub fn conv2d_depthwise(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        const OP: &str = "conv2d_depthwise";
        let xt = self.value(x);
        let kt = self.value(kernel);
        let [n, c, h, w] = xt.shape();
        let [kc, one, kh, kw] = kt.shape();
        if kc != c {
            return Err(Error::ChannelMismatch { op: OP, expected: c, got: kc });
        }
        if one != 1 {
            return Err(Error::ShapeMismatch { op: OP, expected: vec![c, 1, kh, kw], got: kt.shape().to_vec() });
        }
        odd(OP, kh)?;
        odd(OP, kw)?;
        bias_len(OP, self.value(bias), c)?;
        let b = self.value(bias).data();
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let mut y = Tensor::zeros([n, c, h, w]);
        let hw = h * w;
        for ni in 0..n {
            for ci in 0..c {
                let src = xt.plane(ni, ci);
                let dst = &mut y.data_mut()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                dst.iter_mut().for_each(|v| *v = b[ci]);
                for p in 0..kh {
                    for q in 0..kw {
                        let wv = kt.data()[(ci * kh + p) * kw + q];
                        if wv != 0.0 {
                            shifted_axpy(dst, src, h, w, p as isize - ph, q as isize - pw, wv);
                        }
                    }
                }
            }
        }
        self.push(Op::DepthwiseConv { x, kernel, bias }, y)
    }

    /// Full (channel-mixing) convolution with odd kernel and zero "same"
    /// padding. `weight` is `[C_out, C_in, kh, kw]`.
    pub fn conv2d_dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "conv2d_dense";
        let xt = self.value(x);
        let wt = self.value(weight);
        let [n, c, h, w] = xt.shape();
        let [co, ci_w, kh, kw] = wt.shape();
        if ci_w != c {
            return Err(Error::ChannelMismatch { op: OP, expected: c, got: ci_w });
        }
        odd(OP, kh)?;
        odd(OP, kw)?;
        bias_len(OP, self.value(bias), co)?;
        let b = self.value(bias).data();
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let hw = h * w;
        let mut y = Tensor::zeros([n, co, h, w]);
        for ni in 0..n {
            for o in 0..co {
                let dst = &mut y.data_mut()[(ni * co + o) * hw..(ni * co + o + 1) * hw];
                dst.iter_mut().for_each(|v| *v = b[o]);
                for ci in 0..c {
                    let src = xt.plane(ni, ci);
                    for p in 0..kh {
                        for q in 0..kw {
                            let wv = wt.data()[((o * c + ci) * kh + p) * kw + q];
                            shifted_axpy(dst, src, h, w, p as isize - ph, q as isize - pw, wv);
                        }
                    }
                }
            }
        }
        self.push(Op::DenseConv { x, weight, bias }, y)
    }

    /// Per-pixel linear map across channels; `weight` is `[C_out, C, 1, 1]`.
    pub fn conv2d_pointwise(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "conv2d_pointwise";
        let xt = self.value(x);
        let wt = self.value(weight);
        let [n, c, h, w] = xt.shape();
        let [co, ci_w, one_a, one_b] = wt.shape();
        if ci_w != c {
            return Err(Error::ChannelMismatch { op: OP, expected: c, got: ci_w });
        }
        if one_a != 1 || one_b != 1 {
            return Err(Error::ShapeMismatch { op: OP, expected: vec![co, c, 1, 1], got: wt.shape().to_vec() });
        }
        bias_len(OP, self.value(bias), co)?;
        let b = self.value(bias).data();
        let hw = h * w;
        let mut y = Tensor::zeros([n, co, h, w]);
        for ni in 0..n {
            for o in 0..co {
                let dst = &mut y.data_mut()[(ni * co + o) * hw..(ni * co + o + 1) * hw];
                dst.iter_mut().for_each(|v| *v = b[o]);
                for ci in 0..c {
                    let wv = wt.data()[o * c + ci];
                    if wv != 0.0 {
                        axpy(dst, xt.plane(ni, ci), wv);
                    }
                }
            }
        }
        self.push(Op::PointwiseConv { x, weight, bias }, y)
    }

    /// Non-overlapping patch embedding: kernel `stride x stride`, no padding.
    /// `weight` is `[C_out, C_in, stride, stride]`.
    pub fn conv2d_patch(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        const OP: &str = "conv2d_patch";
        let xt = self.value(x);
        let wt = self.value(weight);
        let [n, c, h, w] = xt.shape();
        let [co, ci_w, kh, kw] = wt.shape();
        if ci_w != c {
            return Err(Error::ChannelMismatch { op: OP, expected: c, got: ci_w });
        }
        if kh != stride || kw != stride {
            return Err(Error::ShapeMismatch { op: OP, expected: vec![co, c, stride, stride], got: wt.shape().to_vec() });
        }
        divisible(OP, "height", h, stride)?;
        divisible(OP, "width", w, stride)?;
        bias_len(OP, self.value(bias), co)?;
        let b = self.value(bias).data();
        let (oh, ow) = (h / stride, w / stride);
        let plen = c * stride * stride;
        let mut patch = vec![0.0; plen];
        let mut y = Tensor::zeros([n, co, oh, ow]);
        for ni in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    gather_patch(xt, ni, i, j, stride, &mut patch);
                    for o in 0..co {
                        let v = b[o] + dot(&wt.data()[o * plen..(o + 1) * plen], &patch);
                        y.set(ni, o, i, j, v);
                    }
                }
            }
        }
        self.push(Op::PatchConv { x, weight, bias, stride }, y)
    }

    /// Non-overlapping transposed convolution upsampling by `stride`.
    /// `weight` is `[C_in, C_out, stride, stride]`.
    pub fn conv2d_patch_transpose(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        const OP: &str = "conv2d_patch_transpose";
        let xt = self.value(x);
        let wt = self.value(weight);
        let [n, c, h, w] = xt.shape();
        let [ci_w, co, kh, kw] = wt.shape();
        if ci_w != c {
            return Err(Error::ChannelMismatch { op: OP, expected: c, got: ci_w });
        }
        if kh != stride || kw != stride {
            return Err(Error::ShapeMismatch { op: OP, expected: vec![c, co, stride, stride], got: wt.shape().to_vec() });
        }
        bias_len(OP, self.value(bias), co)?;
        let b = self.value(bias).data();
        let blen = co * stride * stride;
        let mut block = vec![0.0; blen];
        let mut y = Tensor::zeros([n, co, h * stride, w * stride]);
        for ni in 0..n {
            for i in 0..h {
                for j in 0..w {
                    for (o, chunk) in block.chunks_mut(stride * stride).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = b[o]);
                    }
                    for ci in 0..c {
                        axpy(&mut block, &wt.data()[ci * blen..(ci + 1) * blen], xt.at(ni, ci, i, j));
                    }
                    scatter_block(&mut y, ni, i, j, stride, &block);
                }
            }
        }
        self.push(Op::PatchConvTranspose { x, weight, bias, stride }, y)
    }

    /// Affine map over the last axis: every `(n, c, h)` row of width `d_in`
    /// is multiplied by `weight` (`[1, 1, d_in, d_out]`) plus `bias`.
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "fully_connected";
        let xt = self.value(x);
        let wt = self.value(weight);
        let [n, c, h, d_in] = xt.shape();
        let [one_a, one_b, w_in, d_out] = wt.shape();
        if one_a != 1 || one_b != 1 || w_in != d_in {
            return Err(Error::ShapeMismatch { op: OP, expected: vec![1, 1, d_in, d_out], got: wt.shape().to_vec() });
        }
        bias_len(OP, self.value(bias), d_out)?;
        let b = self.value(bias).data();
        let rows = n * c * h;
        let mut y = Tensor::zeros([n, c, h, d_out]);
        {
            let yd = y.data_mut();
            for r in 0..rows {
                let out = &mut yd[r * d_out..(r + 1) * d_out];
                out.copy_from_slice(b);
                let xr = &xt.data()[r * d_in..(r + 1) * d_in];
                for (k, &a) in xr.iter().enumerate() {
                    if a != 0.0 {
                        axpy(out, &wt.data()[k * d_out..(k + 1) * d_out], a);
                    }
                }
            }
        }
        self.push(Op::Linear { x, weight, bias }, y)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Activation::Sigmoid => sigmoid,
            Activation::Gelu => |v| v * normal_cdf(v),
            Activation::Relu => |v| v.max(0.0),
        };
        let y = self.value(x).map(f);
        self.push(Op::Activation { x, kind }, y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        self.push(Op::Add { a, b }, y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        self.push(Op::Mul { a, b }, y)
    }

    /// Normalizes every row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const OP: &str = "layer_norm";
        let xt = self.value(x);
        let [n, c, h, d] = xt.shape();
        bias_len(OP, self.value(gamma), d)?;
        bias_len(OP, self.value(beta), d)?;
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let rows = n * c * h;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut y = Tensor::zeros([n, c, h, d]);
        {
            let yd = y.data_mut();
            for r in 0..rows {
                let row = &xt.data()[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for k in 0..d {
                    yd[r * d + k] = (row[k] - mu) * rs * g[k] + be[k];
                }
                mean.push(mu);
                rstd.push(rs);
            }
        }
        self.push(Op::LayerNorm { x, gamma, beta, mean, rstd }, y)
    }

    /// Multi-head scaled dot-product self-attention. Each `(n, c)` slice of
    /// `qkv` is a `[T, 3d]` matrix laid out as `[q | k | v]`; heads split `d`.
    pub fn self_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        const OP: &str = "self_attention";
        let t = self.value(qkv);
        let [n, c, tokens, three_d] = t.shape();
        divisible(OP, "qkv width", three_d, 3)?;
        let d = three_d / 3;
        divisible(OP, "model width", d, heads)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut y = Tensor::zeros([n, c, tokens, d]);
        let mut probs = vec![0.0; n * c * heads * tokens * tokens];
        let mut q = vec![0.0; tokens * dh];
        let mut k = vec![0.0; tokens * dh];
        let mut v = vec![0.0; tokens * dh];
        let mut o = vec![0.0; tokens * dh];
        for bi in 0..n * c {
            let base = bi * tokens * three_d;
            for hd in 0..heads {
                gather_head(t.data(), base, tokens, three_d, hd * dh, dh, &mut q);
                gather_head(t.data(), base, tokens, three_d, d + hd * dh, dh, &mut k);
                gather_head(t.data(), base, tokens, three_d, 2 * d + hd * dh, dh, &mut v);
                let pbase = (bi * heads + hd) * tokens * tokens;
                let p = &mut probs[pbase..pbase + tokens * tokens];
                for i in 0..tokens {
                    let qi = &q[i * dh..(i + 1) * dh];
                    let row = &mut p[i * tokens..(i + 1) * tokens];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..tokens {
                        let s = dot(qi, &k[j * dh..(j + 1) * dh]) * scale;
                        row[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= z);
                }
                o.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..tokens {
                    let oi = &mut o[i * dh..(i + 1) * dh];
                    for j in 0..tokens {
                        axpy(oi, &v[j * dh..(j + 1) * dh], p[i * tokens + j]);
                    }
                }
                let ybase = bi * tokens * d;
                for i in 0..tokens {
                    y.data_mut()[ybase + i * d + hd * dh..ybase + i * d + (hd + 1) * dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
                }
            }
        }
        self.push(Op::SelfAttention { qkv, heads, probs }, y)
    }

    /// Per-patch DCT coefficients of a single-channel image: output channel
    /// `m` holds the coefficient against `bases[m]` (each `patch x patch`,
    /// row-major) for every non-overlapping patch.
    pub fn patch_dct(&mut self, x: Var, patch: usize, bases: Vec<Vec<f64>>) -> Result<Var> {
        const OP: &str = "patch_dct";
        let xt = self.value(x);
        let [n, c, h, w] = xt.shape();
        if c != 1 {
            return Err(Error::ChannelMismatch { op: OP, expected: 1, got: c });
        }
        divisible(OP, "height", h, patch)?;
        divisible(OP, "width", w, patch)?;
        if bases.iter().any(|b| b.len() != patch * patch) {
            return Err(Error::InvalidArgument(format!("{OP}: every basis must hold {} values", patch * patch)));
        }
        let (gh, gw) = (h / patch, w / patch);
        let k = bases.len();
        let mut buf = vec![0.0; patch * patch];
        let mut y = Tensor::zeros([n, k, gh, gw]);
        for ni in 0..n {
            for i in 0..gh {
                for j in 0..gw {
                    gather_patch(xt, ni, i, j, patch, &mut buf);
                    for (m, basis) in bases.iter().enumerate() {
                        y.set(ni, m, i, j, dot(&buf, basis));
                    }
                }
            }
        }
        self.push(Op::PatchDct { x, patch, bases }, y)
    }

    pub fn avg_pool(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        const OP: &str = "avg_pool";
        let xt = self.value(x);
        let [n, c, h, w] = xt.shape();
        divisible(OP, "height", h, fh)?;
        divisible(OP, "width", w, fw)?;
        let (oh, ow) = (h / fh, w / fw);
        let inv = 1.0 / (fh * fw) as f64;
        let mut y = Tensor::zeros([n, c, oh, ow]);
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let o = y.offset(ni, ci, i / fh, j / fw);
                        y.data_mut()[o] += xt.at(ni, ci, i, j) * inv;
                    }
                }
            }
        }
        self.push(Op::AvgPool { x, fh, fw }, y)
    }

    /// `[N, C, H, W]` feature map to `[N, 1, H*W, C]` token rows.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let [n, c, h, w] = xt.shape();
        let mut y = Tensor::zeros([n, 1, h * w, c]);
        for ni in 0..n {
            for ci in 0..c {
                for (p, &v) in xt.plane(ni, ci).iter().enumerate() {
                    y.set(ni, 0, p, ci, v);
                }
            }
        }
        self.push(Op::ToTokens { x }, y)
    }

    /// Inverse of [`Graph::to_tokens`] for an `h x w` grid.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xt = self.value(x);
        let [n, one, t, c] = xt.shape();
        if one != 1 || t != h * w {
            return Err(Error::ShapeMismatch { op: "from_tokens", expected: vec![n, 1, h * w, c], got: xt.shape().to_vec() });
        }
        let mut y = Tensor::zeros([n, c, h, w]);
        for ni in 0..n {
            for p in 0..t {
                for ci in 0..c {
                    y.set(ni, ci, p / w, p % w, xt.at(ni, 0, p, ci));
                }
            }
        }
        self.push(Op::FromTokens { x }, y)
    }

    /// Propagates `seed` (d loss / d output) back to every leaf that requires
    /// a gradient. Consumes the recording.
    pub fn backward(&mut self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.value(output).expect_shape("backward seed", seed.shape())?;
        self.consumed = true;
        let corrupted = CORRUPTED.with(Cell::get);
        let mut grads: Vec<Option<Tensor>> = (0..self.slots.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut order = Vec::with_capacity(self.nodes.len());
        for idx in (0..self.nodes.len()).rev() {
            order.push(idx);
            let node = &self.nodes[idx];
            let Some(gy) = grads[node.out.0].take() else {
                continue;
            };
            if !self.slots[node.out.0].requires_grad {
                continue;
            }
            let mut local = self.node_backward(&node.op, node.out, &gy)?;
            if corrupted == Some(node.op.kind()) {
                for (_, g) in local.iter_mut() {
                    g.scale(1.5);
                }
            }
            for (v, g) in local {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.slots[v.0].requires_grad)
            .map(|(id, v)| (id.clone(), *v, self.slots[v.0].value.shape()))
            .collect();
        Ok(Gradients { grads, params, order })
    }

    fn needs(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    fn node_backward(&self, op: &Op, out: Var, gy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut res = Vec::new();
        match *op {
            Op::DepthwiseConv { x, kernel, bias } => {
                let xt = self.value(x);
                let kt = self.value(kernel);
                let [n, c, h, w] = xt.shape();
                let [_, _, kh, kw] = kt.shape();
                let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
                let hw = h * w;
                if self.needs(x) {
                    let mut dx = Tensor::zeros(xt.shape());
                    for ni in 0..n {
                        for ci in 0..c {
                            let g = gy.plane(ni, ci);
                            let dst = &mut dx.data_mut()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            for p in 0..kh {
                                for q in 0..kw {
                                    let wv = kt.data()[(ci * kh + p) * kw + q];
                                    shifted_axpy(dst, g, h, w, ph - p as isize, pw - q as isize, wv);
                                }
                            }
                        }
                    }
                    res.push((x, dx));
                }
                if self.needs(kernel) {
                    let mut dk = Tensor::zeros(kt.shape());
                    for ni in 0..n {
                        for ci in 0..c {
                            let (g, src) = (gy.plane(ni, ci), xt.plane(ni, ci));
                            for p in 0..kh {
                                for q in 0..kw {
                                    dk.data_mut()[(ci * kh + p) * kw + q] += shifted_dot(g, src, h, w, p as isize - ph, q as isize - pw);
                                }
                            }
                        }
                    }
                    res.push((kernel, dk));
                }
                if self.needs(bias) {
                    res.push((bias, channel_sums(gy)));
                }
            }
            Op::DenseConv { x, weight, bias } => {
                let xt = self.value(x);
                let wt = self.value(weight);
                let [n, c, h, w] = xt.shape();
                let [co, _, kh, kw] = wt.shape();
                let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
                let hw = h * w;
                if self.needs(x) {
                    let mut dx = Tensor::zeros(xt.shape());
                    for ni in 0..n {
                        for o in 0..co {
                            let g = gy.plane(ni, o);
                            for ci in 0..c {
                                let dst = &mut dx.data_mut()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                                for p in 0..kh {
                                    for q in 0..kw {
                                        let wv = wt.data()[((o * c + ci) * kh + p) * kw + q];
                                        shifted_axpy(dst, g, h, w, ph - p as isize, pw - q as isize, wv);
                                    }
                                }
                            }
                        }
                    }
                    res.push((x, dx));
                }
                if self.needs(weight) {
                    let mut dw = Tensor::zeros(wt.shape());
                    for ni in 0..n {
                        for o in 0..co {
                            let g = gy.plane(ni, o);
                            for ci in 0..c {
                                let src = xt.plane(ni, ci);
                                for p in 0..kh {
                                    for q in 0..kw {
                                        dw.data_mut()[((o * c + ci) * kh + p) * kw + q] +=
                                            shifted_dot(g, src, h, w, p as isize - ph, q as isize - pw);
                                    }
                                }
                            }
                        }
                    }
                    res.push((weight, dw));
                }
                if self.needs(bias) {
                    res.push((bias, channel_sums(gy)));
                }
            }
            Op::PointwiseConv { x, weight, bias } => {
                let xt = self.value(x);
                let wt = self.value(weight);
                let [n, c, h, w] = xt.shape();
                let co = wt.shape()[0];
                let hw = h * w;
                if self.needs(x) {
                    let mut dx = Tensor::zeros(xt.shape());
                    for ni in 0..n {
                        for ci in 0..c {
                            let dst = &mut dx.data_mut()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            for o in 0..co {
                                axpy(dst, gy.plane(ni, o), wt.data()[o * c + ci]);
                            }
                        }
                    }
                    res.push((x, dx));
                }
                if self.needs(weight) {
                    let mut dw = Tensor::zeros(wt.shape());
                    for ni in 0..n {
                        for o in 0..co {
                            for ci in 0..c {
                                dw.data_mut()[o * c + ci] += dot(gy.plane(ni, o), xt.plane(ni, ci));
                            }
                        }
                    }
                    res.push((weight, dw));
                }
                if self.needs(bias) {
                    res.push((bias, channel_sums(gy)));
                }
            }
            Op::PatchConv { x, weight, bias, stride } => {
                let xt = self.value(x);
                let wt = self.value(weight);
                let [n, c, _, _] = xt.shape();
                let [co, _, _, _] = wt.shape();
                let [_, _, oh, ow] = gy.shape();
                let plen = c * stride * stride;
                let mut patch = vec![0.0; plen];
                let mut dpatch = vec![0.0; plen];
                let mut dx = self.needs(x).then(|| Tensor::zeros(xt.shape()));
                let mut dw = self.needs(weight).then(|| Tensor::zeros(wt.shape()));
                for ni in 0..n {
                    for i in 0..oh {
                        for j in 0..ow {
                            if let Some(dw) = dw.as_mut() {
                                gather_patch(xt, ni, i, j, stride, &mut patch);
                                for o in 0..co {
                                    axpy(&mut dw.data_mut()[o * plen..(o + 1) * plen], &patch, gy.at(ni, o, i, j));
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                dpatch.iter_mut().for_each(|v| *v = 0.0);
                                for o in 0..co {
                                    axpy(&mut dpatch, &wt.data()[o * plen..(o + 1) * plen], gy.at(ni, o, i, j));
                                }
                                scatter_block(dx, ni, i, j, stride, &dpatch);
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    res.push((x, dx));
                }
                if let Some(dw) = dw {
                    res.push((weight, dw));
                }
                if self.needs(bias) {
                    res.push((bias, channel_sums(gy)));
                }
            }
            Op::PatchConvTranspose { x, weight, bias, stride } => {
                let xt = self.value(x);
                let wt = self.value(weight);
                let [n, c, h, w] = xt.shape();
                let co = wt.shape()[1];
                let blen = co * stride * stride;
                let mut gblock = vec![0.0; blen];
                let mut dx = self.needs(x).then(|| Tensor::zeros(xt.shape()));
                let mut dw = self.needs(weight).then(|| Tensor::zeros(wt.shape()));
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            gather_patch(gy, ni, i, j, stride, &mut gblock);
                            for ci in 0..c {
                                if let Some(dx) = dx.as_mut() {
                                    let v = dot(&wt.data()[ci * blen..(ci + 1) * blen], &gblock);
                                    let o = dx.offset(ni, ci, i, j);
                                    dx.data_mut()[o] += v;
                                }
                                if let Some(dw) = dw.as_mut() {
                                    axpy(&mut dw.data_mut()[ci * blen..(ci + 1) * blen], &gblock, xt.at(ni, ci, i, j));
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    res.push((x, dx));
                }
                if let Some(dw) = dw {
                    res.push((weight, dw));
                }
                if self.needs(bias) {
                    res.push((bias, channel_sums(gy)));
                }
            }
            Op::Linear { x, weight, bias } => {
                let xt = self.value(x);
                let wt = self.value(weight);
                let d_in = xt.w();
                let d_out = wt.w();
                let rows = xt.len() / d_in.max(1);
                if self.needs(x) {
                    let mut dx = Tensor::zeros(xt.shape());
                    for r in 0..rows {
                        let g = &gy.data()[r * d_out..(r + 1) * d_out];
                        for k in 0..d_in {
                            dx.data_mut()[r * d_in + k] = dot(g, &wt.data()[k * d_out..(k + 1) * d_out]);
                        }
                    }
                    res.push((x, dx));
                }
                if self.needs(weight) {
                    let mut dw = Tensor::zeros(wt.shape());
                    for r in 0..rows {
                        let g = &gy.data()[r * d_out..(r + 1) * d_out];
                        for k in 0..d_in {
                            let a = xt.data()[r * d_in + k];
                            if a != 0.0 {
                                axpy(&mut dw.data_mut()[k * d_out..(k + 1) * d_out], g, a);
                            }
                        }
                    }
                    res.push((weight, dw));
                }
                if self.needs(bias) {
                    let mut db = vec![0.0; d_out];
                    for r in 0..rows {
                        axpy(&mut db, &gy.data()[r * d_out..(r + 1) * d_out], 1.0);
                    }
                    res.push((bias, Tensor::vector(db)));
                }
            }
            Op::Activation { x, kind } => {
                let xt = self.value(x);
                let yt = self.value(out);
                let dx = match kind {
                    Activation::Sigmoid => yt.zip_map(gy, |s, g| g * s * (1.0 - s))?,
                    Activation::Gelu => xt.zip_map(gy, |v, g| g * (normal_cdf(v) + v * normal_pdf(v)))?,
                    Activation::Relu => xt.zip_map(gy, |v, g| if v > 0.0 { g } else { 0.0 })?,
                };
                res.push((x, dx));
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    res.push((a, gy.clone()));
                }
                if self.needs(b) {
                    res.push((b, gy.clone()));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    res.push((a, gy.zip_map(self.value(b), |g, q| g * q)?));
                }
                if self.needs(b) {
                    res.push((b, gy.zip_map(self.value(a), |g, p| g * p)?));
                }
            }
            Op::LayerNorm { x, gamma, beta, ref mean, ref rstd } => {
                let xt = self.value(x);
                let g = self.value(gamma).data();
                let d = xt.w();
                let rows = mean.len();
                let mut dx = self.needs(x).then(|| Tensor::zeros(xt.shape()));
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let row = &xt.data()[r * d..(r + 1) * d];
                    let gr = &gy.data()[r * d..(r + 1) * d];
                    for k in 0..d {
                        xhat[k] = (row[k] - mean[r]) * rstd[r];
                        dxhat[k] = gr[k] * g[k];
                        dg[k] += gr[k] * xhat[k];
                        db[k] += gr[k];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxhat, &xhat) / d as f64;
                        let out = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for k in 0..d {
                            out[k] = rstd[r] * (dxhat[k] - m1 - xhat[k] * m2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    res.push((x, dx));
                }
                if self.needs(gamma) {
                    res.push((gamma, Tensor::vector(dg)));
                }
                if self.needs(beta) {
                    res.push((beta, Tensor::vector(db)));
                }
            }
            Op::SelfAttention { qkv, heads, ref probs } => {
                let t = self.value(qkv);
                let [n, c, tokens, three_d] = t.shape();
                let d = three_d / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = Tensor::zeros(t.shape());
                let mut q = vec![0.0; tokens * dh];
                let mut k = vec![0.0; tokens * dh];
                let mut v = vec![0.0; tokens * dh];
                let mut go = vec![0.0; tokens * dh];
                let mut dq = vec![0.0; tokens * dh];
                let mut dk = vec![0.0; tokens * dh];
                let mut dv = vec![0.0; tokens * dh];
                let mut ds = vec![0.0; tokens];
                for bi in 0..n * c {
                    let base = bi * tokens * three_d;
                    for hd in 0..heads {
                        gather_head(t.data(), base, tokens, three_d, hd * dh, dh, &mut q);
                        gather_head(t.data(), base, tokens, three_d, d + hd * dh, dh, &mut k);
                        gather_head(t.data(), base, tokens, three_d, 2 * d + hd * dh, dh, &mut v);
                        gather_head(gy.data(), bi * tokens * d, tokens, d, hd * dh, dh, &mut go);
                        dq.iter_mut().for_each(|x| *x = 0.0);
                        dk.iter_mut().for_each(|x| *x = 0.0);
                        dv.iter_mut().for_each(|x| *x = 0.0);
                        let pbase = (bi * heads + hd) * tokens * tokens;
                        let p = &probs[pbase..pbase + tokens * tokens];
                        for i in 0..tokens {
                            let gi = &go[i * dh..(i + 1) * dh];
                            let prow = &p[i * tokens..(i + 1) * tokens];
                            let mut inner = 0.0;
                            for j in 0..tokens {
                                let dp = dot(gi, &v[j * dh..(j + 1) * dh]);
                                ds[j] = dp;
                                inner += dp * prow[j];
                                axpy(&mut dv[j * dh..(j + 1) * dh], gi, prow[j]);
                            }
                            for j in 0..tokens {
                                let s = prow[j] * (ds[j] - inner) * scale;
                                if s != 0.0 {
                                    axpy(&mut dq[i * dh..(i + 1) * dh], &k[j * dh..(j + 1) * dh], s);
                                    axpy(&mut dk[j * dh..(j + 1) * dh], &q[i * dh..(i + 1) * dh], s);
                                }
                            }
                        }
                        scatter_head(dqkv.data_mut(), base, tokens, three_d, hd * dh, dh, &dq);
                        scatter_head(dqkv.data_mut(), base, tokens, three_d, d + hd * dh, dh, &dk);
                        scatter_head(dqkv.data_mut(), base, tokens, three_d, 2 * d + hd * dh, dh, &dv);
                    }
                }
                res.push((qkv, dqkv));
            }
            Op::PatchDct { x, patch, ref bases } => {
                let xt = self.value(x);
                let [n, _, h, w] = xt.shape();
                let (gh, gw) = (h / patch, w / patch);
                let mut dx = Tensor::zeros(xt.shape());
                let mut buf = vec![0.0; patch * patch];
                for ni in 0..n {
                    for i in 0..gh {
                        for j in 0..gw {
                            buf.iter_mut().for_each(|v| *v = 0.0);
                            for (m, basis) in bases.iter().enumerate() {
                                axpy(&mut buf, basis, gy.at(ni, m, i, j));
                            }
                            scatter_block(&mut dx, ni, i, j, patch, &buf);
                        }
                    }
                }
                res.push((x, dx));
            }
            Op::AvgPool { x, fh, fw } => {
                let xt = self.value(x);
                let [n, c, h, w] = xt.shape();
                let inv = 1.0 / (fh * fw) as f64;
                let dx = Tensor::from_fn([n, c, h, w], |ni, ci, i, j| gy.at(ni, ci, i / fh, j / fw) * inv);
                res.push((x, dx));
            }
            Op::ToTokens { x } => {
                let [n, c, h, w] = self.value(x).shape();
                let dx = Tensor::from_fn([n, c, h, w], |ni, ci, i, j| gy.at(ni, 0, i * w + j, ci));
                res.push((x, dx));
            }
            Op::FromTokens { x } => {
                let [n, _, t, c] = self.value(x).shape();
                let w = gy.w();
                let dx = Tensor::from_fn([n, 1, t, c], |ni, _, p, ci| gy.at(ni, ci, p / w, p % w));
                res.push((x, dx));
            }
        }
        Ok(res)
    }
}

/// Copies the `s x s` block at grid cell `(i, j)` of every channel into
/// `out`, channel-major then row-major.
fn gather_patch(x: &Tensor, n: usize, i: usize, j: usize, s: usize, out: &mut [f64]) {
    let c = x.c();
    let w = x.w();
    for ci in 0..c {
        let plane = x.plane(n, ci);
        for p in 0..s {
            let row = (i * s + p) * w + j * s;
            out[(ci * s + p) * s..(ci * s + p + 1) * s].copy_from_slice(&plane[row..row + s]);
        }
    }
}

/// Adds `block` (laid out as by [`gather_patch`]) into cell `(i, j)`.
fn scatter_block(y: &mut Tensor, n: usize, i: usize, j: usize, s: usize, block: &[f64]) {
    let [_, c, h, w] = y.shape();
    let hw = h * w;
    let data = y.data_mut();
    for ci in 0..c {
        let base = (n * c + ci) * hw;
        for p in 0..s {
            let row = base + (i * s + p) * w + j * s;
            for (d, b) in data[row..row + s].iter_mut().zip(&block[(ci * s + p) * s..(ci * s + p + 1) * s]) {
                *d += b;
            }
        }
    }
}

fn gather_head(src: &[f64], base: usize, tokens: usize, stride: usize, col: usize, dh: usize, out: &mut [f64]) {
    for t in 0..tokens {
        let s = base + t * stride + col;
        out[t * dh..(t + 1) * dh].copy_from_slice(&src[s..s + dh]);
    }
}

fn scatter_head(dst: &mut [f64], base: usize, tokens: usize, stride: usize, col: usize, dh: usize, src: &[f64]) {
    for t in 0..tokens {
        let s = base + t * stride + col;
        axpy(&mut dst[s..s + dh], &src[t * dh..(t + 1) * dh], 1.0);
    }
}

fn channel_sums(g: &Tensor) -> Tensor {
    let [n, c, _, _] = g.shape();
    let mut out = vec![0.0; c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += g.plane(ni, ci).iter().sum::<f64>();
        }
    }
    Tensor::vector(out)
}
