//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates exact derivatives into the `grad` buffer of every node that
//! (transitively) depends on a `requires_grad` input.
//!
//! A graph is single-threaded; independent graphs share nothing and may be
//! built concurrently.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::dcloss;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-element regression penalty used by [`Graph::regression_loss`].
#[derive(Debug, Clone, Copy)]
pub enum RegressionKind {
    SmoothL1 { beta: f64 },
    /// Adaptive L1/L2 loss; `k` and `delta` are scalar nodes so that they
    /// can be learned alongside the network.
    DcLoss { k: Var, delta: Var, swap_weights: bool },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    BroadcastAddChannel { map: Var, vec: Var },
    MulMask { map: Var, mask: Var },
    GlobalMax { input: Var, argmax: Vec<usize> },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Bilinear { input: Var },
    Nearest { input: Var },
    Reshape(Var),
    Sum(Var),
    Scale(Var, f64),
    Bce { logits: Var, target: Tensor, weight: Tensor },
    Regression { pred: Var, target: Tensor, weight: Tensor, kind: RegressionKind },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a tensor to the tape. Gradients are tracked when
    /// `tensor.requires_grad` is set.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        let mut tensor = tensor;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    /// Same-padded cross-correlation with stride 1.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.conv2d_strided(input, weight, bias, 1)
    }

    pub fn conv2d_strided(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (c_in, h, w) = self.value(input).chw()?;
        let (c_out, wc_in, kh, kw) = match self.value(weight).dims() {
            &[a, b, c, d] => (a, b, c, d),
            d => return Err(Error::shape("conv2d", format!("weight must be 4-d, got {d:?}"))),
        };
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but weight expects {wc_in}"),
            ));
        }
        if ![1, 3].contains(&kh) || ![1, 3].contains(&kw) {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} not in {{1,3}}")));
        }
        if self.value(bias).dims() != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {c_out} output channels", self.value(bias).dims()),
            ));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        let geom = ConvGeom { c_in, h, w, c_out, kh, kw, stride };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let t = Tensor::new(&[c_out, geom.out_h(), geom.out_w()], out)?;
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(t, Op::Conv2d { input, weight, bias, geom }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.dims(), v.data().iter().map(|&a| a.max(0.0)).collect()).unwrap();
        let ng = self.needs(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.dims(), v.data().iter().map(|&a| sigmoid(a)).collect()).unwrap();
        let ng = self.needs(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("add", self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.dims(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("hadamard", self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.dims(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `out[c, y, x] = map[c, y, x] + vec[c]`.
    pub fn broadcast_add_channel(&mut self, map: Var, vec: Var) -> Result<Var> {
        let (c, h, w) = self.value(map).chw()?;
        if self.value(vec).dims() != [c] {
            return Err(Error::shape(
                "broadcast_add_channel",
                format!("vector {:?} vs {c} channels", self.value(vec).dims()),
            ));
        }
        let v = self.value(vec).data().to_vec();
        let m = self.value(map).data();
        let data = m.iter().enumerate().map(|(i, &a)| a + v[i / (h * w)]).collect();
        let t = Tensor::new(&[c, h, w], data)?;
        let ng = self.needs(map) || self.needs(vec);
        Ok(self.push(t, Op::BroadcastAddChannel { map, vec }, ng))
    }

    /// Hadamard product of a `[C,H,W]` map with a `[1,H,W]` or `[C,H,W]` mask.
    pub fn mul_mask(&mut self, map: Var, mask: Var) -> Result<Var> {
        let (c, h, w) = self.value(map).chw()?;
        let (mc, mh, mw) = self.value(mask).chw()?;
        if (mh, mw) != (h, w) || (mc != 1 && mc != c) {
            return Err(Error::shape(
                "mul_mask",
                format!("mask {:?} cannot gate map {:?}", self.value(mask).dims(), self.value(map).dims()),
            ));
        }
        if mc == c {
            return self.mul(map, mask);
        }
        let hw = h * w;
        let mv = self.value(mask).data().to_vec();
        let data = self.value(map).data().iter().enumerate().map(|(i, &a)| a * mv[i % hw]).collect();
        let t = Tensor::new(&[c, h, w], data)?;
        let ng = self.needs(map) || self.needs(mask);
        Ok(self.push(t, Op::MulMask { map, mask }, ng))
    }

    /// Collapses each channel to its spatial maximum: `[C,H,W] -> [C]`.
    pub fn adaptive_max_pool_1x1(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (vals, argmax) = kernels::global_max(self.value(x).data(), c, h * w);
        let t = Tensor::new(&[c], vals)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::GlobalMax { input: x, argmax }, ng))
    }

    /// 2×2 stride-2 max pooling (ceil mode).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (vals, argmax, ho, wo) = kernels::max_pool2(self.value(x).data(), c, h, w);
        let t = Tensor::new(&[c, ho, wo], vals)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::MaxPool2 { input: x, argmax }, ng))
    }

    /// Bilinear upsampling with half-pixel-center alignment.
    pub fn bilinear_upsample(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (oh, ow) = target;
        if oh < h || ow < w {
            return Err(Error::shape(
                "bilinear_upsample",
                format!("target {oh}x{ow} is smaller than source {h}x{w}"),
            ));
        }
        let out = kernels::bilinear_forward(self.value(x).data(), c, h, w, oh, ow);
        let t = Tensor::new(&[c, oh, ow], out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Bilinear { input: x }, ng))
    }

    /// Nearest-neighbour upsampling (`src = floor(i * h / H)`).
    pub fn upsample_nearest(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (oh, ow) = target;
        if oh < h || ow < w {
            return Err(Error::shape("upsample_nearest", format!("target {oh}x{ow} < {h}x{w}")));
        }
        let iy = kernels::nearest_index(h, oh);
        let ix = kernels::nearest_index(w, ow);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for &y in &iy {
                for &xx in &ix {
                    out.push(src[(ch * h + y) * w + xx]);
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Nearest { input: x }, ng))
    }

    /// Same values under new dims with equal element count.
    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let t = Tensor::new(dims, self.value(x).data().to_vec())
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {dims:?}", self.value(x).dims())))?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.dims(), v.data().iter().map(|a| a * factor).collect()).unwrap();
        let ng = self.needs(x);
        self.push(t, Op::Scale(x, factor), ng)
    }

    /// Weighted binary cross-entropy on logits, summed to a scalar:
    /// `sum_i weight_i * (softplus(z_i) - target_i * z_i)`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor, weight: Tensor) -> Result<Var> {
        same_dims("bce_with_logits", self.value(logits), &target)?;
        same_dims("bce_with_logits", self.value(logits), &weight)?;
        let z = self.value(logits).data();
        let mut s = 0.0;
        for i in 0..z.len() {
            let wv = weight.data()[i];
            if wv != 0.0 {
                let softplus = z[i].max(0.0) + (-z[i].abs()).exp().ln_1p();
                s += wv * (softplus - target.data()[i] * z[i]);
            }
        }
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(s), Op::Bce { logits, target, weight }, ng))
    }

    /// Weighted elementwise regression penalty on `|pred - target|`, summed.
    pub fn regression_loss(
        &mut self,
        pred: Var,
        target: Tensor,
        weight: Tensor,
        kind: RegressionKind,
    ) -> Result<Var> {
        same_dims("regression_loss", self.value(pred), &target)?;
        same_dims("regression_loss", self.value(pred), &weight)?;
        let mut ng = self.needs(pred);
        let p = self.value(pred).data();
        let mut s = 0.0;
        match kind {
            RegressionKind::SmoothL1 { beta } => {
                if !(beta > 0.0) {
                    return Err(Error::Invalid(format!("smooth L1 beta must be positive, got {beta}")));
                }
                for i in 0..p.len() {
                    let wv = weight.data()[i];
                    if wv != 0.0 {
                        s += wv * dcloss::smooth_l1_of_error((p[i] - target.data()[i]).abs(), beta);
                    }
                }
            }
            RegressionKind::DcLoss { k, delta, swap_weights } => {
                let kv = self.value(k).item();
                let dv = self.value(delta).item();
                for i in 0..p.len() {
                    let wv = weight.data()[i];
                    if wv != 0.0 {
                        s += wv * dcloss::value_of_error((p[i] - target.data()[i]).abs(), kv, dv, swap_weights);
                    }
                }
                ng = ng || self.needs(k) || self.needs(delta);
            }
        }
        Ok(self.push(Tensor::scalar(s), Op::Regression { pred, target, weight, kind }, ng))
    }

    /// Fingerprint of every non-differentiable branch decision on the tape
    /// (ReLU signs, max-pool winners, `|·|` signs, smooth-L1 branches).
    /// Two evaluations with equal signatures lie in the same smooth piece.
    pub fn signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match &n.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for &v in self.value(*x).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::GlobalMax { argmax, .. } | Op::MaxPool2 { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Regression { pred, target, weight, kind } => {
                    i.hash(&mut h);
                    let p = self.value(*pred).data();
                    for j in 0..p.len() {
                        if weight.data()[j] == 0.0 {
                            continue;
                        }
                        let d = p[j] - target.data()[j];
                        (d.partial_cmp(&0.0)).hash(&mut h);
                        if let RegressionKind::SmoothL1 { beta } = kind {
                            (d.abs() < *beta).hash(&mut h);
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a scalar node. Gradients accumulate into the
    /// existing `grad` buffers of every node on a path to a tracked input.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got dims {:?}", self.value(loss).dims()),
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let slot = &mut self.nodes[i].value.grad;
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<usize> {
            if !self.nodes[v.0].needs_grad {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.len()]);
            }
            Some(v.0)
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let gi = acc(*input, grads).map(|j| std::mem::take(&mut grads[j]).unwrap());
                let gw = acc(*weight, grads).map(|j| std::mem::take(&mut grads[j]).unwrap());
                let gb = acc(*bias, grads).map(|j| std::mem::take(&mut grads[j]).unwrap());
                let (mut gi, mut gw, mut gb) = (gi, gw, gb);
                kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                // input, weight and bias must be distinct nodes
                if let Some(v) = gi {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[weight.0] = Some(v);
                }
                if let Some(v) = gb {
                    grads[bias.0] = Some(v);
                }
            }
            Op::Relu(x) => {
                if let Some(j) = acc(*x, grads) {
                    let xv = self.value(*x).data();
                    let dst = grads[j].as_mut().unwrap();
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            dst[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(j) = acc(*x, grads) {
                    let y = node.value.data();
                    let dst = grads[j].as_mut().unwrap();
                    for k in 0..g.len() {
                        dst[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(j) = acc(*v, grads) {
                        grads[j].as_mut().unwrap().iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if let Some(j) = acc(*v, grads) {
                        let o = self.value(*other).data();
                        let dst = grads[j].as_mut().unwrap();
                        for k in 0..g.len() {
                            dst[k] += g[k] * o[k];
                        }
                    }
                }
            }
            Op::BroadcastAddChannel { map, vec } => {
                if let Some(j) = acc(*map, grads) {
                    grads[j].as_mut().unwrap().iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(j) = acc(*vec, grads) {
                    let c = self.value(*vec).len();
                    let hw = g.len() / c;
                    let dst = grads[j].as_mut().unwrap();
                    for (ch, d) in dst.iter_mut().enumerate() {
                        *d += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::MulMask { map, mask } => {
                let hw = self.value(*mask).len();
                if let Some(j) = acc(*map, grads) {
                    let m = self.value(*mask).data();
                    let dst = grads[j].as_mut().unwrap();
                    for k in 0..g.len() {
                        dst[k] += g[k] * m[k % hw];
                    }
                }
                if let Some(j) = acc(*mask, grads) {
                    let x = self.value(*map).data();
                    let dst = grads[j].as_mut().unwrap();
                    for k in 0..g.len() {
                        dst[k % hw] += g[k] * x[k];
                    }
                }
            }
            Op::GlobalMax { input, argmax } | Op::MaxPool2 { input, argmax } => {
                if let Some(j) = acc(*input, grads) {
                    let dst = grads[j].as_mut().unwrap();
                    for (k, &src) in argmax.iter().enumerate() {
                        dst[src] += g[k];
                    }
                }
            }
            Op::Bilinear { input } => {
                if let Some(j) = acc(*input, grads) {
                    let (c, h, w) = self.value(*input).chw().unwrap();
                    let (_, oh, ow) = node.value.chw().unwrap();
                    kernels::bilinear_backward(g, grads[j].as_mut().unwrap(), c, h, w, oh, ow);
                }
            }
            Op::Nearest { input } => {
                if let Some(j) = acc(*input, grads) {
                    let (c, h, w) = self.value(*input).chw().unwrap();
                    let (_, oh, ow) = node.value.chw().unwrap();
                    let iy = kernels::nearest_index(h, oh);
                    let ix = kernels::nearest_index(w, ow);
                    let dst = grads[j].as_mut().unwrap();
                    let mut k = 0;
                    for ch in 0..c {
                        for &y in &iy {
                            for &x in &ix {
                                dst[(ch * h + y) * w + x] += g[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(j) = acc(*x, grads) {
                    grads[j].as_mut().unwrap().iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Sum(x) => {
                if let Some(j) = acc(*x, grads) {
                    grads[j].as_mut().unwrap().iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Scale(x, f) => {
                if let Some(j) = acc(*x, grads) {
                    grads[j].as_mut().unwrap().iter_mut().zip(g).for_each(|(d, s)| *d += s * f);
                }
            }
            Op::Bce { logits, target, weight } => {
                if let Some(j) = acc(*logits, grads) {
                    let z = self.value(*logits).data();
                    let dst = grads[j].as_mut().unwrap();
                    for k in 0..z.len() {
                        let wv = weight.data()[k];
                        if wv != 0.0 {
                            dst[k] += g[0] * wv * (sigmoid(z[k]) - target.data()[k]);
                        }
                    }
                }
            }
            Op::Regression { pred, target, weight, kind } => {
                let p = self.value(*pred).data();
                match *kind {
                    RegressionKind::SmoothL1 { beta } => {
                        if let Some(j) = acc(*pred, grads) {
                            let dst = grads[j].as_mut().unwrap();
                            for k in 0..p.len() {
                                let wv = weight.data()[k];
                                if wv == 0.0 {
                                    continue;
                                }
                                let d = p[k] - target.data()[k];
                                let de = if d.abs() < beta { d.abs() / beta } else { 1.0 };
                                dst[k] += g[0] * wv * de * sign(d);
                            }
                        }
                    }
                    RegressionKind::DcLoss { k, delta, swap_weights } => {
                        let kv = self.value(k).item();
                        let dv = self.value(delta).item();
                        let (mut sk, mut sd) = (0.0, 0.0);
                        let gp = acc(*pred, grads);
                        for idx in 0..p.len() {
                            let wv = weight.data()[idx];
                            if wv == 0.0 {
                                continue;
                            }
                            let d = p[idx] - target.data()[idx];
                            let gr = dcloss::grad_of_error(d.abs(), kv, dv, swap_weights);
                            if let Some(j) = gp {
                                grads[j].as_mut().unwrap()[idx] += g[0] * wv * gr.d_eps * sign(d);
                            }
                            sk += wv * gr.d_k;
                            sd += wv * gr.d_delta;
                        }
                        if let Some(j) = acc(k, grads) {
                            grads[j].as_mut().unwrap()[0] += g[0] * sk;
                        }
                        if let Some(j) = acc(delta, grads) {
                            grads[j].as_mut().unwrap()[0] += g[0] * sd;
                        }
                    }
                }
            }
        }
    }
}

/// Sign with `sign(0) = 0`, the subgradient choice at the `|·|` kink.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
