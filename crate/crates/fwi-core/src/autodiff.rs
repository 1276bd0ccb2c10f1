//! Reverse-mode automatic differentiation over dense 4-axis arrays
//! (batch, channel, depth, lateral), with exactly the layer set the
//! generator network needs, plus the Adam optimizer and the parameter
//! checkpoint format.
//!
//! Graphs are define-by-run: each op computes its value eagerly and
//! records itself in an arena. `backward` sweeps the arena in reverse
//! creation order (a valid reverse topological order) accumulating
//! gradients additively across fan-out.

use std::io::Write;
use std::path::Path;

use ndarray::{Array4 as NdArray4, Axis};
use rayon::prelude::*;

use crate::error::{FwiError, Result};

/// Dense (n, c, h, w) array of 64-bit floats.
pub type Array4 = NdArray4<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Constant,
    Param,
    Conv2d { stride: usize },
    UpsampleBilinear2x,
    LeakyRelu { slope: f64 },
    ChannelNorm,
    ScaledSigmoid { lo: f64, hi: f64 },
    MaskMul,
    ConcatChannels,
    Crop,
    Sub,
    Mul,
    Abs,
    Sum,
    Scale { k: f64 },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Array4,
    grad: Option<Array4>,
    needs_grad: bool,
}

/// Computation arena. Build ops through its methods, then call
/// [`Graph::backward`] once on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn finite_check(value: &Array4, what: &str) {
    debug_assert!(
        value.iter().all(|x| x.is_finite()),
        "non-finite value out of {what}"
    );
    let _ = (value, what);
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Array4, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            needs_grad,
        });
        id
    }

    fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Array4 {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last [`Graph::backward`] call; `None`
    /// for nodes off the differentiation path.
    pub fn grad(&self, id: NodeId) -> Option<&Array4> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array4) -> NodeId {
        self.push(Op::Constant, vec![], value, false)
    }

    /// Leaf parameter; `backward` accumulates its gradient.
    pub fn param(&mut self, value: Array4) -> NodeId {
        self.push(Op::Param, vec![], value, true)
    }

    /// Cross-correlation with zero same-padding (k odd): output spatial
    /// dims equal the input at stride 1 and halve (ceil) at stride 2.
    /// `kernel` is (c_out, c_in, k, k); `bias` is (1, c_out, 1, 1).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let (xn, xc, xh, xw) = self.nodes[x.0].value.dim();
        let (co, ci, kh, kw) = self.nodes[kernel.0].value.dim();
        let bdim = self.nodes[bias.0].value.dim();
        if !(stride == 1 || stride == 2) {
            return Err(FwiError::invalid("stride", format!("must be 1 or 2, got {stride}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(FwiError::shape(format!(
                "conv kernel must be square with odd size, got {kh}x{kw}"
            )));
        }
        if ci != xc {
            return Err(FwiError::shape(format!(
                "conv input has {xc} channels, kernel expects {ci}"
            )));
        }
        if bdim != (1, co, 1, 1) {
            return Err(FwiError::shape(format!(
                "conv bias must be (1,{co},1,1), got {bdim:?}"
            )));
        }
        let pad = (kh - 1) / 2;
        let oh = (xh + 2 * pad - kh) / stride + 1;
        let ow = (xw + 2 * pad - kw) / stride + 1;
        let xs = self.nodes[x.0].value.as_slice().expect("standard layout");
        let ks = self.nodes[kernel.0].value.as_slice().expect("standard layout");
        let bs = self.nodes[bias.0].value.as_slice().expect("standard layout");
        let mut out = Array4::zeros((xn, co, oh, ow));
        {
            let os = out.as_slice_mut().expect("standard layout");
            os.par_chunks_mut(oh * ow)
                .enumerate()
                .for_each(|(chunk, plane)| {
                    let n = chunk / co;
                    let c_out = chunk % co;
                    conv_forward_plane(
                        plane, xs, ks, bs, n, c_out, ci, xh, xw, kh, pad, stride, oh, ow,
                    );
                });
        }
        finite_check(&out, "conv2d");
        let needs = self.any_needs_grad(&[x, kernel, bias]);
        Ok(self.push(Op::Conv2d { stride }, vec![x, kernel, bias], out, needs))
    }

    /// Doubles both spatial dims by bilinear interpolation with the
    /// align-corners-false convention. Linear; backward is the transpose.
    pub fn upsample_bilinear_x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[x.0].value.dim();
        if h < 2 || w < 2 {
            return Err(FwiError::shape(format!("upsample needs h,w >= 2, got {h}x{w}")));
        }
        let taps_y = bilinear_taps(h);
        let taps_x = bilinear_taps(w);
        let xs = self.nodes[x.0].value.as_slice().expect("standard layout");
        let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
        {
            let os = out.as_slice_mut().expect("standard layout");
            os.par_chunks_mut(4 * h * w)
                .enumerate()
                .for_each(|(plane_idx, plane)| {
                    let src = &xs[plane_idx * h * w..(plane_idx + 1) * h * w];
                    for oy in 0..2 * h {
                        let (y0, y1, wy) = taps_y[oy];
                        for ox in 0..2 * w {
                            let (x0, x1, wx) = taps_x[ox];
                            plane[oy * 2 * w + ox] = (1.0 - wy) * (1.0 - wx) * src[y0 * w + x0]
                                + (1.0 - wy) * wx * src[y0 * w + x1]
                                + wy * (1.0 - wx) * src[y1 * w + x0]
                                + wy * wx * src[y1 * w + x1];
                        }
                    }
                });
        }
        finite_check(&out, "upsample");
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(Op::UpsampleBilinear2x, vec![x], out, needs))
    }

    /// x for x >= 0, slope*x otherwise.
    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let out = self.nodes[x.0]
            .value
            .mapv(|v| if v >= 0.0 { v } else { slope * v });
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::LeakyRelu { slope }, vec![x], out, needs)
    }

    /// Standardizes each (batch, channel) plane over its spatial dims to
    /// mean 0 / variance 1 (eps 1e-5), then applies learned gain and
    /// shift of shape (1, c, 1, 1).
    pub fn channel_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[x.0].value.dim();
        if h * w < 2 {
            return Err(FwiError::shape("channel_norm needs h*w >= 2".to_string()));
        }
        for (name, id) in [("gain", gain), ("shift", shift)] {
            if self.nodes[id.0].value.dim() != (1, c, 1, 1) {
                return Err(FwiError::shape(format!(
                    "channel_norm {name} must be (1,{c},1,1), got {:?}",
                    self.nodes[id.0].value.dim()
                )));
            }
        }
        let xs = self.nodes[x.0].value.as_slice().expect("standard layout");
        let gs = self.nodes[gain.0].value.as_slice().expect("standard layout");
        let ss = self.nodes[shift.0].value.as_slice().expect("standard layout");
        let mut out = Array4::zeros((n, c, h, w));
        {
            let os = out.as_slice_mut().expect("standard layout");
            let hw = h * w;
            for plane_idx in 0..n * c {
                let ch = plane_idx % c;
                let src = &xs[plane_idx * hw..(plane_idx + 1) * hw];
                let (mean, var) = mean_var(src);
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                let dst = &mut os[plane_idx * hw..(plane_idx + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = gs[ch] * (s - mean) * inv + ss[ch];
                }
            }
        }
        finite_check(&out, "channel_norm");
        let needs = self.any_needs_grad(&[x, gain, shift]);
        Ok(self.push(Op::ChannelNorm, vec![x, gain, shift], out, needs))
    }

    /// lo + (hi - lo) * sigmoid(x), elementwise.
    pub fn scaled_sigmoid(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(FwiError::invalid("range", format!("need lo < hi, got [{lo}, {hi}]")));
        }
        let out = self.nodes[x.0].value.mapv(|v| lo + (hi - lo) * sigmoid(v));
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(Op::ScaledSigmoid { lo, hi }, vec![x], out, needs))
    }

    /// Elementwise multiply by a 0/1 mask, either full-shape or
    /// per-channel (1, c, 1, 1). No keep-probability rescaling. The mask
    /// must be a constant node.
    pub fn apply_mask(&mut self, x: NodeId, mask: NodeId) -> Result<NodeId> {
        let xd = self.nodes[x.0].value.dim();
        let md = self.nodes[mask.0].value.dim();
        if md != xd && md != (1, xd.1, 1, 1) {
            return Err(FwiError::shape(format!(
                "mask {md:?} does not broadcast over {xd:?}"
            )));
        }
        if !self.nodes[mask.0].value.iter().all(|&m| m == 0.0 || m == 1.0) {
            return Err(FwiError::invalid("mask", "entries must be 0 or 1"));
        }
        if self.nodes[mask.0].needs_grad {
            return Err(FwiError::invalid("mask", "mask must be a constant node"));
        }
        let out = broadcast_mul(&self.nodes[x.0].value, &self.nodes[mask.0].value);
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(Op::MaskMul, vec![x, mask], out, needs))
    }

    /// Concatenates along the channel axis, `a` channels first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (an, ac, ah, aw) = self.nodes[a.0].value.dim();
        let (bn, _bc, bh, bw) = self.nodes[b.0].value.dim();
        if (an, ah, aw) != (bn, bh, bw) {
            return Err(FwiError::shape(format!(
                "concat spatial dims differ: {:?} vs {:?}",
                self.nodes[a.0].value.dim(),
                self.nodes[b.0].value.dim()
            )));
        }
        let mut out = Array4::zeros((an, ac + _bc, ah, aw));
        out.slice_mut(ndarray::s![.., ..ac, .., ..])
            .assign(&self.nodes[a.0].value);
        out.slice_mut(ndarray::s![.., ac.., .., ..])
            .assign(&self.nodes[b.0].value);
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push(Op::ConcatChannels, vec![a, b], out, needs))
    }

    /// Keeps the top-left (h, w) spatial window.
    pub fn crop(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let (_, _, xh, xw) = self.nodes[x.0].value.dim();
        if h > xh || w > xw {
            return Err(FwiError::shape(format!("crop to {h}x{w} from {xh}x{xw}")));
        }
        let out = self.nodes[x.0]
            .value
            .slice(ndarray::s![.., .., ..h, ..w])
            .to_owned();
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(Op::Crop, vec![x], out, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        if self.nodes[a.0].value.dim() != self.nodes[b.0].value.dim() {
            return Err(FwiError::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.nodes[a.0].value.dim(),
                self.nodes[b.0].value.dim()
            )));
        }
        let out = match op {
            Op::Sub => &self.nodes[a.0].value - &self.nodes[b.0].value,
            Op::Mul => &self.nodes[a.0].value * &self.nodes[b.0].value,
            _ => unreachable!(),
        };
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push(op, vec![a, b], out, needs))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(f64::abs);
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::Abs, vec![x], out, needs)
    }

    /// Sums every element into a (1,1,1,1) scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x.0].value.iter().sum();
        let out = Array4::from_elem((1, 1, 1, 1), total);
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::Sum, vec![x], out, needs)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| k * v);
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::Scale { k }, vec![x], out, needs)
    }

    /// Scalar value of a (1,1,1,1) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[(0, 0, 0, 0)]
    }

    /// Reverse sweep from a scalar loss, accumulating gradients for every
    /// node on the differentiation path.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.backward_seeded(loss, 1.0)
    }

    /// Reverse sweep with a chosen seed value for d(loss)/d(loss).
    pub fn backward_seeded(&mut self, loss: NodeId, seed: f64) -> Result<()> {
        if self.nodes[loss.0].value.dim() != (1, 1, 1, 1) {
            return Err(FwiError::invalid(
                "loss",
                format!(
                    "backward needs a scalar node, got {:?}",
                    self.nodes[loss.0].value.dim()
                ),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Array4::from_elem((1, 1, 1, 1), seed));
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let grad = self.nodes[idx].grad.clone().expect("checked above");
            self.propagate(idx, &grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Array4) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, grad: &Array4) {
        let inputs = self.nodes[idx].inputs.clone();
        match self.nodes[idx].op {
            Op::Constant | Op::Param => {}
            Op::Conv2d { stride } => {
                let (dx, dk, db) = conv_backward(
                    &self.nodes[inputs[0].0].value,
                    &self.nodes[inputs[1].0].value,
                    grad,
                    stride,
                );
                self.accumulate(inputs[0], dx);
                self.accumulate(inputs[1], dk);
                self.accumulate(inputs[2], db);
            }
            Op::UpsampleBilinear2x => {
                let dx = upsample_backward(&self.nodes[inputs[0].0].value, grad);
                self.accumulate(inputs[0], dx);
            }
            Op::LeakyRelu { slope } => {
                let mut dx = grad.clone();
                dx.zip_mut_with(&self.nodes[inputs[0].0].value, |g, &v| {
                    if v < 0.0 {
                        *g *= slope;
                    }
                });
                self.accumulate(inputs[0], dx);
            }
            Op::ChannelNorm => {
                let (dx, dgain, dshift) = channel_norm_backward(
                    &self.nodes[inputs[0].0].value,
                    &self.nodes[inputs[1].0].value,
                    grad,
                );
                self.accumulate(inputs[0], dx);
                self.accumulate(inputs[1], dgain);
                self.accumulate(inputs[2], dshift);
            }
            Op::ScaledSigmoid { lo, hi } => {
                let mut dx = grad.clone();
                dx.zip_mut_with(&self.nodes[idx].value, |g, &yv| {
                    let s = (yv - lo) / (hi - lo);
                    *g *= (hi - lo) * s * (1.0 - s);
                });
                self.accumulate(inputs[0], dx);
            }
            Op::MaskMul => {
                let dx = broadcast_mul(grad, &self.nodes[inputs[1].0].value);
                self.accumulate(inputs[0], dx);
            }
            Op::ConcatChannels => {
                let ac = self.nodes[inputs[0].0].value.dim().1;
                let da = grad.slice(ndarray::s![.., ..ac, .., ..]).to_owned();
                let db = grad.slice(ndarray::s![.., ac.., .., ..]).to_owned();
                self.accumulate(inputs[0], da);
                self.accumulate(inputs[1], db);
            }
            Op::Crop => {
                let dim = self.nodes[inputs[0].0].value.raw_dim();
                let (_, _, gh, gw) = grad.dim();
                let mut dx = Array4::zeros(dim);
                dx.slice_mut(ndarray::s![.., .., ..gh, ..gw]).assign(grad);
                self.accumulate(inputs[0], dx);
            }
            Op::Sub => {
                self.accumulate(inputs[0], grad.clone());
                self.accumulate(inputs[1], -grad.clone());
            }
            Op::Mul => {
                let da = grad * &self.nodes[inputs[1].0].value;
                let db = grad * &self.nodes[inputs[0].0].value;
                self.accumulate(inputs[0], da);
                self.accumulate(inputs[1], db);
            }
            Op::Abs => {
                let mut dx = grad.clone();
                dx.zip_mut_with(&self.nodes[inputs[0].0].value, |g, &v| {
                    *g *= if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(inputs[0], dx);
            }
            Op::Sum => {
                let g = grad[(0, 0, 0, 0)];
                let dx = Array4::from_elem(self.nodes[inputs[0].0].value.raw_dim(), g);
                self.accumulate(inputs[0], dx);
            }
            Op::Scale { k } => {
                self.accumulate(inputs[0], grad.mapv(|g| k * g));
            }
        }
    }
}

const NORM_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Interpolation taps for one axis of a x2 upsample, align-corners-false:
/// output o samples source coordinate (o + 0.5)/2 - 0.5, edge-clamped.
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let s = (o as f64 + 0.5) / 2.0 - 0.5;
            if s < 0.0 {
                return (0, 0, 0.0);
            }
            let floor = s.floor();
            let w = s - floor;
            let i0 = (floor as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, w)
        })
        .collect()
}

fn broadcast_mul(x: &Array4, mask: &Array4) -> Array4 {
    if mask.dim() == x.dim() {
        return x * mask;
    }
    let mut out = x.clone();
    let c = x.dim().1;
    for ch in 0..c {
        let m = mask[(0, ch, 0, 0)];
        out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * m);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_forward_plane(
    plane: &mut [f64],
    xs: &[f64],
    ks: &[f64],
    bs: &[f64],
    n: usize,
    c_out: usize,
    ci: usize,
    xh: usize,
    xw: usize,
    k: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let bias = bs[c_out];
    for v in plane.iter_mut() {
        *v = bias;
    }
    for c_in in 0..ci {
        let src = &xs[(n * ci + c_in) * xh * xw..(n * ci + c_in + 1) * xh * xw];
        let kern = &ks[(c_out * ci + c_in) * k * k..(c_out * ci + c_in + 1) * k * k];
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let mut acc = 0.0;
                for ky in 0..k {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= xh as isize {
                        continue;
                    }
                    let row = iy as usize * xw;
                    for kx in 0..k {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= xw as isize {
                            continue;
                        }
                        acc += kern[ky * k + kx] * src[row + ix as usize];
                    }
                }
                plane[oy * ow + ox] += acc;
            }
        }
    }
}

fn conv_backward(
    x: &Array4,
    kernel: &Array4,
    grad: &Array4,
    stride: usize,
) -> (Array4, Array4, Array4) {
    let (n_batch, ci, xh, xw) = x.dim();
    let (co, _, k, _) = kernel.dim();
    let (_, _, oh, ow) = grad.dim();
    let pad = (k - 1) / 2;
    let xs = x.as_slice().expect("standard layout");
    let ks = kernel.as_slice().expect("standard layout");
    let gs = grad.as_slice().expect("standard layout");

    let mut d_bias = Array4::zeros((1, co, 1, 1));
    for c_out in 0..co {
        let mut acc = 0.0;
        for n in 0..n_batch {
            let g = &gs[(n * co + c_out) * oh * ow..(n * co + c_out + 1) * oh * ow];
            acc += g.iter().sum::<f64>();
        }
        d_bias[(0, c_out, 0, 0)] = acc;
    }

    let mut d_kernel = Array4::zeros((co, ci, k, k));
    {
        let dks = d_kernel.as_slice_mut().expect("standard layout");
        dks.par_chunks_mut(ci * k * k)
            .enumerate()
            .for_each(|(c_out, kplane)| {
                for n in 0..n_batch {
                    let g = &gs[(n * co + c_out) * oh * ow..(n * co + c_out + 1) * oh * ow];
                    for c_in in 0..ci {
                        let src = &xs[(n * ci + c_in) * xh * xw..(n * ci + c_in + 1) * xh * xw];
                        let kp = &mut kplane[c_in * k * k..(c_in + 1) * k * k];
                        for ky in 0..k {
                            for kx in 0..k {
                                let mut acc = 0.0;
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= xh as isize {
                                        continue;
                                    }
                                    let row = iy as usize * xw;
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= xw as isize {
                                            continue;
                                        }
                                        acc += g[oy * ow + ox] * src[row + ix as usize];
                                    }
                                }
                                kp[ky * k + kx] += acc;
                            }
                        }
                    }
                }
            });
    }

    let mut d_x = Array4::zeros((n_batch, ci, xh, xw));
    {
        let dxs = d_x.as_slice_mut().expect("standard layout");
        dxs.par_chunks_mut(xh * xw)
            .enumerate()
            .for_each(|(chunk, plane)| {
                let n = chunk / ci;
                let c_in = chunk % ci;
                for c_out in 0..co {
                    let g = &gs[(n * co + c_out) * oh * ow..(n * co + c_out + 1) * oh * ow];
                    let kern = &ks[(c_out * ci + c_in) * k * k..(c_out * ci + c_in + 1) * k * k];
                    for iy in 0..xh {
                        for ix in 0..xw {
                            let mut acc = 0.0;
                            for ky in 0..k {
                                let oy_num = iy as isize + pad as isize - ky as isize;
                                if oy_num < 0 || oy_num % stride as isize != 0 {
                                    continue;
                                }
                                let oy = (oy_num / stride as isize) as usize;
                                if oy >= oh {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ox_num = ix as isize + pad as isize - kx as isize;
                                    if ox_num < 0 || ox_num % stride as isize != 0 {
                                        continue;
                                    }
                                    let ox = (ox_num / stride as isize) as usize;
                                    if ox >= ow {
                                        continue;
                                    }
                                    acc += kern[ky * k + kx] * g[oy * ow + ox];
                                }
                            }
                            plane[iy * xw + ix] += acc;
                        }
                    }
                }
            });
    }

    (d_x, d_kernel, d_bias)
}

fn upsample_backward(x: &Array4, grad: &Array4) -> Array4 {
    let (n, c, h, w) = x.dim();
    let taps_y = bilinear_taps(h);
    let taps_x = bilinear_taps(w);
    let gs = grad.as_slice().expect("standard layout");
    let mut d_x = Array4::zeros((n, c, h, w));
    {
        let ds = d_x.as_slice_mut().expect("standard layout");
        ds.par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(plane_idx, plane)| {
                let g = &gs[plane_idx * 4 * h * w..(plane_idx + 1) * 4 * h * w];
                for oy in 0..2 * h {
                    let (y0, y1, wy) = taps_y[oy];
                    for ox in 0..2 * w {
                        let (x0, x1, wx) = taps_x[ox];
                        let gv = g[oy * 2 * w + ox];
                        plane[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * gv;
                        plane[y0 * w + x1] += (1.0 - wy) * wx * gv;
                        plane[y1 * w + x0] += wy * (1.0 - wx) * gv;
                        plane[y1 * w + x1] += wy * wx * gv;
                    }
                }
            });
    }
    d_x
}

fn channel_norm_backward(x: &Array4, gain: &Array4, grad: &Array4) -> (Array4, Array4, Array4) {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let count = hw as f64;
    let xs = x.as_slice().expect("standard layout");
    let gs = grad.as_slice().expect("standard layout");
    let gains = gain.as_slice().expect("standard layout");
    let mut d_x = Array4::zeros((n, c, h, w));
    let mut d_gain = Array4::zeros((1, c, 1, 1));
    let mut d_shift = Array4::zeros((1, c, 1, 1));
    let ds = d_x.as_slice_mut().expect("standard layout");
    for plane_idx in 0..n * c {
        let ch = plane_idx % c;
        let src = &xs[plane_idx * hw..(plane_idx + 1) * hw];
        let g = &gs[plane_idx * hw..(plane_idx + 1) * hw];
        let (mean, var) = mean_var(src);
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        let mut sum_g = 0.0;
        let mut sum_g_xhat = 0.0;
        for (&gv, &sv) in g.iter().zip(src) {
            sum_g += gv;
            sum_g_xhat += gv * (sv - mean) * inv;
        }
        d_gain[(0, ch, 0, 0)] += sum_g_xhat;
        d_shift[(0, ch, 0, 0)] += sum_g;
        let k = gains[ch] * inv;
        let dst = &mut ds[plane_idx * hw..(plane_idx + 1) * hw];
        for ((d, &gv), &sv) in dst.iter_mut().zip(g).zip(src) {
            let xhat = (sv - mean) * inv;
            *d = k * (gv - sum_g / count - xhat * sum_g_xhat / count);
        }
    }
    (d_x, d_gain, d_shift)
}

/// Adam moment accumulators for an ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Array4>,
    v: Vec<Array4>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Array4]) -> Self {
        AdamState {
            m: params.iter().map(|p| Array4::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array4::zeros(p.raw_dim())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    params: &mut [Array4],
    grads: &[Array4],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(FwiError::shape(format!(
            "adam_step: {} params, {} grads, {} states",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.raw_dim() != g.raw_dim() {
            return Err(FwiError::shape("adam_step: param/grad dims differ".to_string()));
        }
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
        });
    }
    Ok(())
}

const PARAM_MAGIC: &[u8; 4] = b"FWIP";

/// Writes an ordered list of arrays: magic "FWIP", u32 count, then per
/// array u32 rank (always 4), u32 dims, and the f64 values, all
/// little-endian. Round-trips bit-exactly.
pub fn save_params(path: impl AsRef<Path>, arrays: &[Array4]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAM_MAGIC);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        buf.extend_from_slice(&4u32.to_le_bytes());
        let (n, c, h, w) = a.dim();
        for d in [n, c, h, w] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a file written by [`save_params`].
pub fn load_params(path: impl AsRef<Path>) -> Result<Vec<Array4>> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, field: &str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(FwiError::format(field, "truncated payload"));
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    let magic = take(&mut pos, 4, "magic")?;
    if magic != PARAM_MAGIC {
        return Err(FwiError::format("magic", "expected FWIP"));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4, "count")?.try_into().unwrap()) as usize;
    let mut arrays = Vec::with_capacity(count);
    for idx in 0..count {
        let rank = u32::from_le_bytes(take(&mut pos, 4, "rank")?.try_into().unwrap());
        if rank != 4 {
            return Err(FwiError::format(
                "rank",
                format!("array {idx}: expected 4, got {rank}"),
            ));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = u32::from_le_bytes(take(&mut pos, 4, "dims")?.try_into().unwrap()) as usize;
        }
        let n = dims.iter().product::<usize>();
        let raw = take(&mut pos, 8 * n, "values")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push(
            Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), values)
                .map_err(|e| FwiError::format("dims", e.to_string()))?,
        );
    }
    if pos != bytes.len() {
        return Err(FwiError::format(
            "payload",
            format!("{} trailing bytes", bytes.len() - pos),
        ));
    }
    Ok(arrays)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_array(rng: &mut ChaCha20Rng, dim: (usize, usize, usize, usize)) -> Array4 {
        Array4::from_shape_fn(dim, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central finite-difference check of d(loss)/d(target entries) for a
    /// graph rebuilt by `build` from the target array.
    fn fd_check(
        target: &Array4,
        build: impl Fn(&Array4) -> (Graph, NodeId, NodeId),
        n_probe: usize,
        h: f64,
        tol: f64,
        seed: u64,
    ) {
        let (mut g, target_id, loss) = build(target);
        g.backward(loss).unwrap();
        let analytic = g.grad(target_id).expect("gradient").clone();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let len = target.len();
        for _ in 0..n_probe {
            let flat = rng.random_range(0..len);
            let idx = flat_to_idx(target, flat);
            let mut plus = target.clone();
            plus[idx] += h;
            let mut minus = target.clone();
            minus[idx] -= h;
            let (gp, _, lp) = build(&plus);
            let (gm, _, lm) = build(&minus);
            let fd = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
            let an = analytic[idx];
            assert!(
                (fd - an).abs() <= tol * an.abs().max(1.0),
                "fd {fd} vs analytic {an} at {idx:?}"
            );
        }
    }

    fn flat_to_idx(a: &Array4, flat: usize) -> (usize, usize, usize, usize) {
        let (_, c, h, w) = a.dim();
        let n_i = flat / (c * h * w);
        let rem = flat % (c * h * w);
        let c_i = rem / (h * w);
        let rem = rem % (h * w);
        (n_i, c_i, rem / w, rem % w)
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = rand_array(&mut rng, (1, 1, 5, 7));
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let k = g.constant(Array4::from_elem((1, 1, 1, 1), 1.0));
        let b = g.constant(Array4::zeros((1, 1, 1, 1)));
        let y = g.conv2d(xid, k, b, 1).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv_ones_kernel_counts_taps_under_zero_padding() {
        let x = Array4::from_elem((1, 1, 5, 5), 1.0);
        let mut g = Graph::new();
        let xid = g.constant(x);
        let k = g.constant(Array4::from_elem((1, 1, 3, 3), 1.0));
        let b = g.constant(Array4::zeros((1, 1, 1, 1)));
        let y = g.conv2d(xid, k, b, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out[(0, 0, 2, 2)], 9.0);
        assert_eq!(out[(0, 0, 0, 0)], 4.0);
        assert_eq!(out[(0, 0, 0, 2)], 6.0);
    }

    #[test]
    fn conv_stride2_halves_spatial_dims_ceil() {
        let mut g = Graph::new();
        let x = g.constant(Array4::zeros((1, 2, 7, 10)));
        let k = g.constant(Array4::zeros((3, 2, 3, 3)));
        let b = g.constant(Array4::zeros((1, 3, 1, 1)));
        let y = g.conv2d(x, k, b, 2).unwrap();
        assert_eq!(g.value(y).dim(), (1, 3, 4, 5));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x0 = rand_array(&mut rng, (1, 2, 6, 6));
        let k0 = rand_array(&mut rng, (3, 2, 3, 3));
        let b0 = rand_array(&mut rng, (1, 3, 1, 1));
        let coef1 = rand_array(&mut rng, (1, 3, 6, 6));
        let coef2 = rand_array(&mut rng, (1, 3, 3, 3));
        for stride in [1usize, 2] {
            let weight = if stride == 1 { coef1.clone() } else { coef2.clone() };
            fd_check(
                &x0,
                |x| {
                    let mut g = Graph::new();
                    let xid = g.param(x.clone());
                    let k = g.constant(k0.clone());
                    let b = g.constant(b0.clone());
                    let y = g.conv2d(xid, k, b, stride).unwrap();
                    let w = g.constant(weight.clone());
                    let p = g.mul(y, w).unwrap();
                    let loss = g.sum(p);
                    (g, xid, loss)
                },
                12,
                1e-5,
                1e-7,
                100 + stride as u64,
            );
            fd_check(
                &k0,
                |k| {
                    let mut g = Graph::new();
                    let xid = g.constant(x0.clone());
                    let kid = g.param(k.clone());
                    let b = g.constant(b0.clone());
                    let y = g.conv2d(xid, kid, b, stride).unwrap();
                    let w = g.constant(weight.clone());
                    let p = g.mul(y, w).unwrap();
                    let loss = g.sum(p);
                    (g, kid, loss)
                },
                12,
                1e-5,
                1e-7,
                200 + stride as u64,
            );
            fd_check(
                &b0,
                |b| {
                    let mut g = Graph::new();
                    let xid = g.constant(x0.clone());
                    let k = g.constant(k0.clone());
                    let bid = g.param(b.clone());
                    let y = g.conv2d(xid, k, bid, stride).unwrap();
                    let w = g.constant(weight.clone());
                    let p = g.mul(y, w).unwrap();
                    let loss = g.sum(p);
                    (g, bid, loss)
                },
                3,
                1e-5,
                1e-7,
                300 + stride as u64,
            );
        }
    }

    #[test]
    fn upsample_constant_field_stays_constant() {
        let mut g = Graph::new();
        let x = g.constant(Array4::from_elem((1, 2, 3, 4), 2.5));
        let y = g.upsample_bilinear_x2(x).unwrap();
        assert_eq!(g.value(y).dim(), (1, 2, 6, 8));
        assert!(g.value(y).iter().all(|&v| (v - 2.5).abs() < 1e-14));
    }

    #[test]
    fn upsample_adjoint_dot_test() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = rand_array(&mut rng, (1, 2, 5, 6));
        let y = rand_array(&mut rng, (1, 2, 10, 12));
        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let up = g.upsample_bilinear_x2(xid).unwrap();
        let yid = g.constant(y.clone());
        let p = g.mul(up, yid).unwrap();
        let loss = g.sum(p);
        let up_x_dot_y = g.scalar(loss);
        g.backward(loss).unwrap();
        let upt_y = g.grad(xid).unwrap();
        let x_dot_upt_y: f64 = x.iter().zip(upt_y.iter()).map(|(a, b)| a * b).sum();
        assert!(
            (up_x_dot_y - x_dot_upt_y).abs() <= 1e-12 * up_x_dot_y.abs().max(1.0),
            "<Ux,y>={up_x_dot_y} vs <x,Ut y>={x_dot_upt_y}"
        );
    }

    #[test]
    fn upsample_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x0 = rand_array(&mut rng, (1, 1, 4, 5));
        let coef = rand_array(&mut rng, (1, 1, 8, 10));
        fd_check(
            &x0,
            |x| {
                let mut g = Graph::new();
                let xid = g.param(x.clone());
                let y = g.upsample_bilinear_x2(xid).unwrap();
                let w = g.constant(coef.clone());
                let p = g.mul(y, w).unwrap();
                let loss = g.sum(p);
                (g, xid, loss)
            },
            10,
            1e-6,
            1e-8,
            11,
        );
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(Array4::from_shape_vec((1, 1, 1, 2), vec![2.0, -1.0]).unwrap());
        let y = g.leaky_relu(x, 0.1);
        assert_eq!(g.value(y).as_slice().unwrap(), &[2.0, -0.1]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().as_slice().unwrap(), &[1.0, 0.1]);

        let mut rng = ChaCha20Rng::seed_from_u64(5);
        // Keep probes away from the kink at zero.
        let x0 = rand_array(&mut rng, (1, 2, 4, 4)).mapv(|v| v + 0.05 * v.signum());
        fd_check(
            &x0,
            |x| {
                let mut g = Graph::new();
                let xid = g.param(x.clone());
                let y = g.leaky_relu(xid, 0.1);
                let y2 = g.mul(y, y).unwrap();
                let loss = g.sum(y2);
                (g, xid, loss)
            },
            10,
            1e-5,
            1e-10,
            17,
        );
    }

    #[test]
    fn channel_norm_standardizes_each_channel() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let x = rand_array(&mut rng, (1, 3, 6, 7)).mapv(|v| 3.0 * v + 1.5);
        let mut g = Graph::new();
        let xid = g.constant(x);
        let gain = g.constant(Array4::from_elem((1, 3, 1, 1), 1.0));
        let shift = g.constant(Array4::zeros((1, 3, 1, 1)));
        let y = g.channel_norm(xid, gain, shift).unwrap();
        for ch in 0..3 {
            let plane: Vec<f64> = g.value(y).index_axis(Axis(1), ch).iter().cloned().collect();
            let (mean, var) = mean_var(&plane);
            assert!(mean.abs() < 1e-10, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn channel_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x0 = rand_array(&mut rng, (1, 2, 4, 5));
        let g0 = rand_array(&mut rng, (1, 2, 1, 1)).mapv(|v| v + 1.5);
        let s0 = rand_array(&mut rng, (1, 2, 1, 1));
        let coef = rand_array(&mut rng, (1, 2, 4, 5));
        fd_check(
            &x0,
            |x| {
                let mut g = Graph::new();
                let xid = g.param(x.clone());
                let gain = g.constant(g0.clone());
                let shift = g.constant(s0.clone());
                let y = g.channel_norm(xid, gain, shift).unwrap();
                let w = g.constant(coef.clone());
                let p = g.mul(y, w).unwrap();
                let loss = g.sum(p);
                (g, xid, loss)
            },
            12,
            1e-6,
            1e-6,
            21,
        );
        fd_check(
            &g0,
            |gain0| {
                let mut g = Graph::new();
                let xid = g.constant(x0.clone());
                let gain = g.param(gain0.clone());
                let shift = g.constant(s0.clone());
                let y = g.channel_norm(xid, gain, shift).unwrap();
                let w = g.constant(coef.clone());
                let p = g.mul(y, w).unwrap();
                let loss = g.sum(p);
                (g, gain, loss)
            },
            2,
            1e-6,
            1e-6,
            22,
        );
        fd_check(
            &s0,
            |shift0| {
                let mut g = Graph::new();
                let xid = g.constant(x0.clone());
                let gain = g.constant(g0.clone());
                let shift = g.param(shift0.clone());
                let y = g.channel_norm(xid, gain, shift).unwrap();
                let w = g.constant(coef.clone());
                let p = g.mul(y, w).unwrap();
                let loss = g.sum(p);
                (g, shift, loss)
            },
            2,
            1e-6,
            1e-6,
            23,
        );
    }

    #[test]
    fn scaled_sigmoid_range_and_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Array4::from_shape_vec((1, 1, 1, 3), vec![0.0, 30.0, -30.0]).unwrap());
        let y = g.scaled_sigmoid(x, 1500.0, 5500.0).unwrap();
        let out = g.value(y);
        assert!((out[(0, 0, 0, 0)] - 3500.0).abs() < 1e-9);
        assert!(out[(0, 0, 0, 1)] <= 5500.0 && out[(0, 0, 0, 1)] > 5499.9);
        assert!(out[(0, 0, 0, 2)] >= 1500.0 && out[(0, 0, 0, 2)] < 1500.1);

        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x0 = rand_array(&mut rng, (1, 1, 3, 4)).mapv(|v| 3.0 * v);
        fd_check(
            &x0,
            |x| {
                let mut g = Graph::new();
                let xid = g.param(x.clone());
                let y = g.scaled_sigmoid(xid, -2.0, 3.0).unwrap();
                let loss = g.sum(y);
                (g, xid, loss)
            },
            10,
            1e-6,
            1e-9,
            31,
        );
    }

    #[test]
    fn mask_identity_zero_and_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let x = rand_array(&mut rng, (1, 4, 3, 3));
        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let ones = g.constant(Array4::from_elem((1, 4, 1, 1), 1.0));
        let y = g.apply_mask(xid, ones).unwrap();
        assert_eq!(g.value(y), &x);

        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let zeros = g.constant(Array4::zeros((1, 4, 1, 1)));
        let y = g.apply_mask(xid, zeros).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(xid).unwrap().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let mask =
            g.constant(Array4::from_shape_vec((1, 4, 1, 1), vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let y = g.apply_mask(xid, mask).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let grad = g.grad(xid).unwrap();
        for ch in 0..4 {
            let expect = if ch % 2 == 0 { 1.0 } else { 0.0 };
            assert!(grad.index_axis(Axis(1), ch).iter().all(|&v| v == expect));
        }

        let bad = Array4::from_elem((1, 4, 1, 1), 0.5);
        let mut g = Graph::new();
        let xid = g.constant(x);
        let bad_id = g.constant(bad);
        assert!(g.apply_mask(xid, bad_id).is_err());
    }

    #[test]
    fn mask_adjoint_dot_test() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let x = rand_array(&mut rng, (1, 6, 4, 4));
        let y = rand_array(&mut rng, (1, 6, 4, 4));
        let mask_vals = Array4::from_shape_fn((1, 6, 1, 1), |_| {
            if rng.random::<f64>() < 0.5 {
                1.0
            } else {
                0.0
            }
        });
        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let m = g.constant(mask_vals);
        let mx = g.apply_mask(xid, m).unwrap();
        let yid = g.constant(y.clone());
        let p = g.mul(mx, yid).unwrap();
        let loss = g.sum(p);
        let lhs = g.scalar(loss);
        g.backward(loss).unwrap();
        let rhs: f64 = x.iter().zip(g.grad(xid).unwrap().iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn concat_and_crop_roundtrip_gradients() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let a0 = rand_array(&mut rng, (1, 2, 4, 4));
        let b0 = rand_array(&mut rng, (1, 3, 4, 4));
        let coef = rand_array(&mut rng, (1, 5, 3, 2));
        fd_check(
            &a0,
            |a| {
                let mut g = Graph::new();
                let aid = g.param(a.clone());
                let bid = g.constant(b0.clone());
                let cat = g.concat_channels(aid, bid).unwrap();
                let cropped = g.crop(cat, 3, 2).unwrap();
                let w = g.constant(coef.clone());
                let p = g.mul(cropped, w).unwrap();
                let loss = g.sum(p);
                (g, aid, loss)
            },
            8,
            1e-6,
            1e-9,
            41,
        );
    }

    #[test]
    fn backward_sum_gives_ones_and_quadratic_gives_2x() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let x = rand_array(&mut rng, (1, 2, 3, 3));
        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let loss = g.sum(xid);
        g.backward(loss).unwrap();
        assert!(g.grad(xid).unwrap().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let sq = g.mul(xid, xid).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let grad = g.grad(xid).unwrap();
        for (gv, xv) in grad.iter().zip(x.iter()) {
            assert!((gv - 2.0 * xv).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Array4::zeros((1, 1, 2, 2)));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn fanout_accumulates_sum_of_path_gradients() {
        // loss = sum(x*x) * sum(x*x) with the inner node shared: the
        // gradient must equal the closed form 4*sum(x^2)*x.
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let x = rand_array(&mut rng, (1, 1, 3, 3));
        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let a = g.mul(xid, xid).unwrap();
        let s1 = g.sum(a);
        let s2 = g.sum(a);
        let both = g.mul(s1, s2).unwrap();
        g.backward(both).unwrap();
        let shared = g.grad(xid).unwrap().clone();
        let sum_sq: f64 = x.iter().map(|v| v * v).sum();
        for (gv, xv) in shared.iter().zip(x.iter()) {
            let expect = 4.0 * sum_sq * xv;
            assert!(
                (gv - expect).abs() < 1e-10 * expect.abs().max(1.0),
                "{gv} vs {expect}"
            );
        }
    }

    #[test]
    fn adam_first_step_is_signlike() {
        let p0 = Array4::from_shape_vec((1, 1, 1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        let grad = Array4::from_shape_vec((1, 1, 1, 3), vec![0.3, -0.7, 0.0]).unwrap();
        let mut params = vec![p0.clone()];
        let mut state = AdamState::new(&params);
        let lr = 0.01;
        adam_step(&mut params, &[grad.clone()], &mut state, lr).unwrap();
        for i in 0..3 {
            let g = grad[(0, 0, 0, i)];
            let expect = p0[(0, 0, 0, i)] - lr * g / (g.abs() + state.eps);
            assert!(
                (params[0][(0, 0, 0, i)] - expect).abs() < 1e-12,
                "entry {i}: {} vs {expect}",
                params[0][(0, 0, 0, i)]
            );
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let p0 = Array4::from_elem((1, 1, 2, 2), 3.25);
        let mut params = vec![p0.clone()];
        let mut state = AdamState::new(&params);
        for _ in 0..5 {
            adam_step(&mut params, &[Array4::zeros((1, 1, 2, 2))], &mut state, 0.1).unwrap();
        }
        assert_eq!(params[0], p0);
    }

    #[test]
    fn adam_trajectories_are_deterministic() {
        let run = |seed: u64| -> Vec<Array4> {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut params = vec![Array4::from_shape_fn((1, 1, 2, 3), |_| rng.random::<f64>())];
            let mut state = AdamState::new(&params);
            for _ in 0..20 {
                let grad = Array4::from_shape_fn((1, 1, 2, 3), |_| rng.random::<f64>() - 0.5);
                adam_step(&mut params, &[grad], &mut state, 0.05).unwrap();
            }
            params
        };
        assert_eq!(run(99), run(99));
    }

    #[test]
    fn params_file_roundtrip_bit_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let arrays = vec![
            rand_array(&mut rng, (2, 3, 4, 5)),
            rand_array(&mut rng, (1, 1, 1, 1)),
            rand_array(&mut rng, (4, 1, 3, 3)),
        ];
        let dir = std::env::temp_dir().join("fwi_params_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.fwip");
        save_params(&path, &arrays).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back, arrays);
        std::fs::write(&path, b"FWIQ").unwrap();
        assert!(load_params(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
