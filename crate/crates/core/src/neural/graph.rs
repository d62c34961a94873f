//! Reverse-mode tape. Every op appends a node holding its forward value; the
//! graph is rebuilt for each training step.

use std::collections::HashMap;

use super::kernels::{col2im, gemm, im2col, upsample_taps, ConvGeom, Strides};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    /// `geom` describes the forward convolution that this op is the adjoint of,
    /// i.e. from the output grid back to the input grid.
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Upsample(Var, usize),
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool(Var),
    Custom(Vec<(Var, Tensor)>),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
    name: Option<String>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn dim_err(msg: String) -> Error {
    Error::InvalidDimension(msg)
}

fn conv_output(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s == 0 || k == 0 || n + 2 * p < k {
        return Err(dim_err(format!(
            "convolution with kernel {k}, stride {s}, padding {p} does not fit input {n}"
        )));
    }
    Ok((n + 2 * p - k) / s + 1)
}

fn conv_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, n: usize, co: usize, g: &ConvGeom) -> Vec<f64> {
    let (k, p, inl) = (g.rows(), g.out_len(), g.channels * g.in_len());
    let mut out = vec![0.0; n * co * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for s in 0..n {
        let xs = &x[s * inl..(s + 1) * inl];
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let o = &mut out[s * co * p..(s + 1) * co * p];
        let mut beta = 0.0;
        if let Some(b) = bias {
            for (c, chunk) in o.chunks_exact_mut(p).enumerate() {
                chunk.fill(b[c]);
            }
            beta = 1.0;
        }
        gemm(co, k, p, 1.0, w, Strides::row_major(k), src, Strides::row_major(p), beta, o, Strides::row_major(p));
    }
    out
}

fn channel_sums(g: &[f64], n: usize, c: usize) -> Vec<f64> {
    let p = g.len() / (n * c);
    let mut out = vec![0.0; c];
    for (i, chunk) in g.chunks_exact(p).enumerate() {
        out[i % c] += chunk.iter().sum::<f64>();
    }
    out
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    /// Input whose gradient is recorded by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true, None)
    }

    /// Trainable parameter leaf; repeated calls for one store and name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let leaf = store.leaf_name(name);
        if let Some(&v) = self.params.get(&leaf) {
            return Ok(v);
        }
        let v = self.leaf(store.get(name)?.clone(), true, Some(leaf.clone()));
        self.params.insert(leaf, v);
        Ok(v)
    }

    /// Parameter read as a constant: no gradient flows into the store.
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        Ok(self.constant(store.get(name)?.clone()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradients of named parameter leaves.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.nodes.iter().filter_map(|n| match (&n.name, &n.grad) {
            (Some(name), Some(g)) => Some((name.as_str(), g)),
            _ => None,
        })
    }

    /// Reverse-mode pass from a scalar. Leaf gradients accumulate across
    /// repeated calls; they are never reset by the graph itself.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (v, t) in self.local_grads(i, &g)? {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, gy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (xs, ws) = (val(*x), val(*w));
                let (n, co) = (xs.shape()[0], ws.shape()[0]);
                let (k, p, inl) = (geom.rows(), geom.out_len(), geom.channels * geom.in_len());
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = vec![0.0; if want_x { xs.len() } else { 0 }];
                let mut gw = vec![0.0; if want_w { ws.len() } else { 0 }];
                let mut cols = vec![0.0; k * p];
                for s in 0..n {
                    let g = &gy.data()[s * co * p..(s + 1) * co * p];
                    let x_s = &xs.data()[s * inl..(s + 1) * inl];
                    if want_w {
                        let src: &[f64] = if geom.is_pointwise() {
                            x_s
                        } else {
                            im2col(x_s, geom, &mut cols);
                            &cols
                        };
                        gemm(co, p, k, 1.0, g, Strides::row_major(p), src, Strides::transposed(p), 1.0, &mut gw, Strides::row_major(k));
                    }
                    if want_x {
                        let gx_s = &mut gx[s * inl..(s + 1) * inl];
                        if geom.is_pointwise() {
                            gemm(k, co, p, 1.0, ws.data(), Strides::transposed(k), g, Strides::row_major(p), 0.0, gx_s, Strides::row_major(p));
                        } else {
                            gemm(k, co, p, 1.0, ws.data(), Strides::transposed(k), g, Strides::row_major(p), 0.0, &mut cols, Strides::row_major(p));
                            col2im(&cols, geom, gx_s);
                        }
                    }
                }
                if want_x {
                    out.push((*x, like(*x, gx)?));
                }
                if want_w {
                    out.push((*w, like(*w, gw)?));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    out.push((b, like(b, channel_sums(gy.data(), n, co))?));
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let (xs, ws) = (val(*x), val(*w));
                let (n, ci) = (xs.shape()[0], xs.shape()[1]);
                let co = geom.channels;
                let (k, p, outl) = (geom.rows(), geom.out_len(), co * geom.in_len());
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = vec![0.0; if want_x { xs.len() } else { 0 }];
                let mut gw = vec![0.0; if want_w { ws.len() } else { 0 }];
                let mut cols = vec![0.0; k * p];
                for s in 0..n {
                    im2col(&gy.data()[s * outl..(s + 1) * outl], geom, &mut cols);
                    if want_x {
                        let gx_s = &mut gx[s * ci * p..(s + 1) * ci * p];
                        gemm(ci, k, p, 1.0, ws.data(), Strides::row_major(k), &cols, Strides::row_major(p), 0.0, gx_s, Strides::row_major(p));
                    }
                    if want_w {
                        let x_s = &xs.data()[s * ci * p..(s + 1) * ci * p];
                        gemm(ci, p, k, 1.0, x_s, Strides::row_major(p), &cols, Strides::transposed(p), 1.0, &mut gw, Strides::row_major(k));
                    }
                }
                if want_x {
                    out.push((*x, like(*x, gx)?));
                }
                if want_w {
                    out.push((*w, like(*w, gw)?));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    out.push((b, like(b, channel_sums(gy.data(), n, co))?));
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = val(*x).shape();
                let c = shape[1];
                let l: usize = shape[2..].iter().product();
                let gam = gamma.map(|g| val(g).data());
                let mut gx = vec![0.0; xhat.len()];
                let mut ggam = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for (blk, &istd) in inv_std.iter().enumerate() {
                    let ch = blk % c;
                    let scale = gam.map_or(1.0, |g| g[ch]);
                    let r = blk * l..(blk + 1) * l;
                    let (gyb, xh) = (&gy.data()[r.clone()], &xhat[r.clone()]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for (g, h) in gyb.iter().zip(xh) {
                        m1 += g;
                        m2 += g * h;
                    }
                    ggam[ch] += m2;
                    gbeta[ch] += m1;
                    let (m1, m2) = (m1 * scale / l as f64, m2 * scale / l as f64);
                    for ((o, g), h) in gx[r].iter_mut().zip(gyb).zip(xh) {
                        *o = istd * (g * scale - m1 - h * m2);
                    }
                }
                if self.wants(*x) {
                    out.push((*x, like(*x, gx)?));
                }
                if let Some(g) = gamma.filter(|g| self.wants(*g)) {
                    out.push((g, like(g, ggam)?));
                }
                if let Some(b) = beta.filter(|b| self.wants(*b)) {
                    out.push((b, like(b, gbeta)?));
                }
            }
            Op::LeakyRelu(x, slope) => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { g * slope })
                    .collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                let d = y.iter().zip(gy.data()).map(|(&y, &g)| g * y * (1.0 - y)).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Upsample(x, f) => {
                let s = val(*x).shape();
                let (h, w, d) = (s[2], s[3], s[4]);
                let (th, tw, td) = (upsample_taps(h, *f), upsample_taps(w, *f), upsample_taps(d, *f));
                let mut gx = vec![0.0; val(*x).len()];
                let (il, ol) = (h * w * d, th.len() * tw.len() * td.len());
                for (blk, g) in gy.data().chunks_exact(ol).enumerate() {
                    let dst = &mut gx[blk * il..(blk + 1) * il];
                    let mut o = 0;
                    for &(h0, h1, a) in &th {
                        for &(w0, w1, b) in &tw {
                            for &(d0, d1, c) in &td {
                                let v = g[o];
                                o += 1;
                                for (hi, wh) in [(h0, 1.0 - a), (h1, a)] {
                                    for (wi, ww) in [(w0, 1.0 - b), (w1, b)] {
                                        let base = (hi * w + wi) * d;
                                        let s = v * wh * ww;
                                        dst[base + d0] += s * (1.0 - c);
                                        dst[base + d1] += s * c;
                                    }
                                }
                            }
                        }
                    }
                }
                out.push((*x, like(*x, gx)?));
            }
            Op::Concat(xs) => {
                let n = gy.shape()[0];
                let rest: usize = gy.shape()[2..].iter().product();
                let total = gy.shape()[1] * rest;
                let mut offset = 0;
                for &x in xs {
                    let width = val(x).shape()[1] * rest;
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(n * width);
                        for s in 0..n {
                            d.extend_from_slice(&gy.data()[s * total + offset..s * total + offset + width]);
                        }
                        out.push((x, like(x, d)?));
                    }
                    offset += width;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        out.push((v, gy.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, gy.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, gy.map(|g| -g)));
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let d = gy.data().iter().zip(val(other).data()).map(|(g, o)| g * o).collect();
                        out.push((v, like(v, d)?));
                    }
                }
            }
            Op::Scale(x, s) => out.push((*x, gy.map(|g| g * s))),
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), gy.data()[0]))),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                out.push((*x, Tensor::full(val(*x).shape(), gy.data()[0] / n)));
            }
            Op::Reshape(x) => out.push((*x, gy.clone().reshape(val(*x).shape())?)),
            Op::Linear { x, w, b } => {
                let (xs, ws) = (val(*x), val(*w));
                let (n, f) = (xs.shape()[0], xs.shape()[1]);
                let o = ws.shape()[0];
                if self.wants(*x) {
                    let mut gx = vec![0.0; n * f];
                    gemm(n, o, f, 1.0, gy.data(), Strides::row_major(o), ws.data(), Strides::row_major(f), 0.0, &mut gx, Strides::row_major(f));
                    out.push((*x, like(*x, gx)?));
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; o * f];
                    gemm(o, n, f, 1.0, gy.data(), Strides::transposed(o), xs.data(), Strides::row_major(f), 0.0, &mut gw, Strides::row_major(f));
                    out.push((*w, like(*w, gw)?));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    out.push((b, like(b, channel_sums(gy.data(), n, o))?));
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = val(*x);
                let l: usize = xs.shape()[2..].iter().product();
                let d = gy.data().iter().flat_map(|&g| std::iter::repeat(g / l as f64).take(l)).collect();
                out.push((*x, like(*x, d)?));
            }
            Op::Custom(inputs) => {
                let g = gy.data()[0];
                for (v, local) in inputs {
                    if self.wants(*v) {
                        out.push((*v, local.map(|d| d * g)));
                    }
                }
            }
        }
        Ok(out)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn rank(&self, v: Var, rank: usize, op: &str) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(dim_err(format!("{op}: expected rank {rank}, got shape {s:?}")));
        }
        Ok(s)
    }

    fn check_bias(&self, b: Option<Var>, n: usize, op: &str) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(dim_err(format!("{op}: bias shape {:?}, expected [{n}]", self.shape(b))));
            }
        }
        Ok(())
    }

    /// Cross-correlation of `x: [N, C, H, W, D]` with `w: [Co, C, kh, kw, kd]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        let xs = self.rank(x, 5, "conv3d")?.to_vec();
        let ws = self.rank(w, 5, "conv3d")?.to_vec();
        if ws[1] != xs[1] {
            return Err(dim_err(format!("conv3d: input has {} channels, kernel expects {}", xs[1], ws[1])));
        }
        self.check_bias(b, ws[0], "conv3d")?;
        let kernel = [ws[2], ws[3], ws[4]];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_output(xs[2 + a], kernel[a], stride[a], padding[a])?;
        }
        let geom = ConvGeom {
            channels: xs[1],
            input: [xs[2], xs[3], xs[4]],
            kernel,
            stride,
            padding,
            output,
        };
        let bias = b.map(|b| self.value(b).data());
        let data = conv_forward(self.value(x).data(), self.value(w).data(), bias, xs[0], ws[0], &geom);
        let value = Tensor::new(vec![xs[0], ws[0], output[0], output[1], output[2]], data)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Conv { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution of `x: [N, Ci, H, W, D]` with `w: [Ci, Co, kh, kw, kd]`;
    /// output extent per axis is `(n − 1)·stride − 2·padding + k`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        let xs = self.rank(x, 5, "conv_transpose3d")?.to_vec();
        let ws = self.rank(w, 5, "conv_transpose3d")?.to_vec();
        if ws[0] != xs[1] {
            return Err(dim_err(format!(
                "conv_transpose3d: input has {} channels, kernel expects {}",
                xs[1], ws[0]
            )));
        }
        let (n, ci, co) = (xs[0], xs[1], ws[1]);
        self.check_bias(b, co, "conv_transpose3d")?;
        let kernel = [ws[2], ws[3], ws[4]];
        let mut full = [0; 3];
        for a in 0..3 {
            let span = (xs[2 + a] - 1) * stride[a] + kernel[a];
            if stride[a] == 0 || span <= 2 * padding[a] {
                return Err(dim_err(format!(
                    "conv_transpose3d: padding {} too large for input {}",
                    padding[a],
                    xs[2 + a]
                )));
            }
            full[a] = span - 2 * padding[a];
        }
        let geom = ConvGeom {
            channels: co,
            input: full,
            kernel,
            stride,
            padding,
            output: [xs[2], xs[3], xs[4]],
        };
        let (k, p, outl) = (geom.rows(), geom.out_len(), co * geom.in_len());
        let mut data = vec![0.0; n * outl];
        let mut cols = vec![0.0; k * p];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for s in 0..n {
            gemm(k, ci, p, 1.0, wd, Strides::transposed(k), &xd[s * ci * p..(s + 1) * ci * p], Strides::row_major(p), 0.0, &mut cols, Strides::row_major(p));
            let o = &mut data[s * outl..(s + 1) * outl];
            col2im(&cols, &geom, o);
            if let Some(b) = b {
                for (c, chunk) in o.chunks_exact_mut(geom.in_len()).enumerate() {
                    let bias = self.value(b).data()[c];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::new(vec![n, co, full[0], full[1], full[2]], data)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::ConvTranspose { x, w, b, geom }, &inputs))
    }

    /// Per-sample, per-channel normalization over spatial axes with optional
    /// affine `gamma`, `beta` of shape `[C]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(dim_err(format!("instance_norm: needs spatial axes, got {s:?}")));
        }
        self.check_bias(gamma, s[1], "instance_norm")?;
        self.check_bias(beta, s[1], "instance_norm")?;
        let c = s[1];
        let l: usize = s[2..].iter().product();
        let xd = self.value(x).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(s[0] * c);
        let mut y = vec![0.0; xd.len()];
        for (blk, chunk) in xd.chunks_exact(l).enumerate() {
            let mean = chunk.iter().sum::<f64>() / l as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(istd);
            let ch = blk % c;
            let g = gamma.map_or(1.0, |g| self.value(g).data()[ch]);
            let b = beta.map_or(0.0, |b| self.value(b).data()[ch]);
            for j in 0..l {
                let h = (chunk[j] - mean) * istd;
                xhat[blk * l + j] = h;
                y[blk * l + j] = h * g + b;
            }
        }
        let value = Tensor::new(s, y)?;
        let inputs: Vec<Var> = [Some(x), gamma, beta].into_iter().flatten().collect();
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &inputs,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Trilinear upsampling of `[N, C, H, W, D]` by an integer factor, sampling
    /// at half-pixel centers with edge clamping.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.rank(x, 5, "upsample")?.to_vec();
        if factor == 0 {
            return Err(dim_err("upsample: factor must be positive".into()));
        }
        let (h, w, d) = (s[2], s[3], s[4]);
        let (th, tw, td) = (upsample_taps(h, factor), upsample_taps(w, factor), upsample_taps(d, factor));
        let il = h * w * d;
        let ol = th.len() * tw.len() * td.len();
        let xd = self.value(x).data();
        let mut y = vec![0.0; s[0] * s[1] * ol];
        for (blk, src) in xd.chunks_exact(il).enumerate() {
            let dst = &mut y[blk * ol..(blk + 1) * ol];
            let mut o = 0;
            for &(h0, h1, a) in &th {
                for &(w0, w1, b) in &tw {
                    for &(d0, d1, c) in &td {
                        let mut acc = 0.0;
                        for (hi, wh) in [(h0, 1.0 - a), (h1, a)] {
                            for (wi, ww) in [(w0, 1.0 - b), (w1, b)] {
                                let base = (hi * w + wi) * d;
                                acc += wh * ww * (src[base + d0] * (1.0 - c) + src[base + d1] * c);
                            }
                        }
                        dst[o] = acc;
                        o += 1;
                    }
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], h * factor, w * factor, d * factor], y)?;
        Ok(self.push(value, Op::Upsample(x, factor), &[x]))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::EmptyInput("concat of no tensors".into()));
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(dim_err(format!("concat: needs a channel axis, got {s0:?}")));
        }
        let mut channels = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(dim_err(format!("concat: shape {s:?} incompatible with {s0:?}")));
            }
            channels += s[1];
        }
        let rest: usize = s0[2..].iter().product();
        let mut data = Vec::with_capacity(s0[0] * channels * rest);
        for n in 0..s0[0] {
            for &x in xs {
                let width = self.shape(x)[1] * rest;
                data.extend_from_slice(&self.value(x).data()[n * width..(n + 1) * width]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[N, ...] → [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product::<usize>();
        self.reshape(x, &[n, rest])
    }

    /// `x: [N, F]`, `w: [O, F]`, `b: [O]` → `x·wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.rank(x, 2, "linear")?.to_vec();
        let ws = self.rank(w, 2, "linear")?.to_vec();
        if xs[1] != ws[1] {
            return Err(dim_err(format!("linear: input width {} but weight expects {}", xs[1], ws[1])));
        }
        self.check_bias(b, ws[0], "linear")?;
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; n * o];
        let mut beta = 0.0;
        if let Some(b) = b {
            for row in y.chunks_exact_mut(o) {
                row.copy_from_slice(self.value(b).data());
            }
            beta = 1.0;
        }
        gemm(n, f, o, 1.0, self.value(x).data(), Strides::row_major(f), self.value(w).data(), Strides::transposed(f), beta, &mut y, Strides::row_major(o));
        let value = Tensor::new(vec![n, o], y)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Mean over spatial axes: `[N, C, ...] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(dim_err(format!("global_avg_pool: needs spatial axes, got {s:?}")));
        }
        let l: usize = s[2..].iter().product();
        let data = self.value(x).data().chunks_exact(l).map(|c| c.iter().sum::<f64>() / l as f64).collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Scalar node computed outside the graph, with its gradient with respect
    /// to each input supplied by the caller.
    pub fn custom_scalar(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &inputs {
            if g.shape() != self.shape(*v) {
                return Err(dim_err(format!(
                    "custom_scalar: gradient shape {:?} for input of shape {:?}",
                    g.shape(),
                    self.shape(*v)
                )));
            }
        }
        let vars: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        Ok(self.push(Tensor::scalar(value), Op::Custom(inputs), &vars))
    }
}
