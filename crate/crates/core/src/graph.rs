//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the backward sweep is a single reverse walk. Gradients
//! are only materialized for nodes that some gradient actually reached, which
//! lets callers tell "received no gradient" apart from "received zeros".

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics used by a normalization node.
#[derive(Clone, Debug)]
pub enum NormStats {
    /// Whiten with the statistics of the current batch.
    Batch,
    /// Whiten with fixed (running) statistics.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Upsample {
        x: Var,
        fy: usize,
        fx: usize,
    },
    Concat(Vec<Var>),
    Gram(Var),
    WeightedSqDiff {
        a: Var,
        b: Var,
        group: usize,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-channel batch mean and (biased) variance observed by a norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel (N*H*W).
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (parameters, probed inputs).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Same value, but gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    /// 2-D convolution without bias. `w` is `[c_out, c_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (co, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, kernel expects {ci}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} does not fit {h}x{wd}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let ck = ci * kh * kw;
        let ohw = oh * ow;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let mut cols = vec![0.0; n * ck * ohw];
        let mut out = vec![0.0; n * co * ohw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let col = &mut cols[s * ck * ohw..(s + 1) * ck * ohw];
            im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &geom, col);
            let y = &mut out[s * co * ohw..(s + 1) * co * ohw];
            gemm(co, ck, ohw, wv, false, col, false, y, 0.0);
        }
        let value = Tensor::from_vec(&[n, co, oh, ow], out)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            },
            needs,
        ))
    }

    /// Per-channel normalization followed by the affine pair `(gamma, beta)`.
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &NormStats,
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!(
                "norm: affine parameters must have {c} entries"
            )));
        }
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x).data();
        let (mean, var) = match stats {
            NormStats::Batch => {
                if m < 2 {
                    return Err(Error::Contract(format!(
                        "batch statistics need at least 2 elements per channel, got {m}"
                    )));
                }
                batch_moments(xv, n, c, hw)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!(
                        "norm: running statistics must have {c} entries"
                    )));
                }
                (mean.clone(), var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: matches!(stats, NormStats::Batch),
            },
            needs,
        ))
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample(&mut self, x: Var, fy: usize, fx: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if fy == 1 && fx == 1 {
            return Ok(x);
        }
        let (oh, ow) = (h * fy, w * fx);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(p * oh + oy) * ow + ox] = xv[(p * h + oy / fy) * w + ox / fx];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Upsample { x, fy, fx }, needs))
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape("concat: mismatched N/H/W".into()));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).sample(s));
            }
        }
        let value = Tensor::from_vec(&[n, total_c, h, w], out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), needs))
    }

    /// Per-sample Gram matrices: `[N, C, H, W] -> [N, C, C]`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * c];
        for s in 0..n {
            let f = &xv[s * c * hw..(s + 1) * c * hw];
            gemm(c, hw, c, f, false, f, true, &mut out[s * c * c..(s + 1) * c * c], 0.0);
        }
        let value = Tensor::from_vec(&[n, c, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Gram(x), needs))
    }

    /// `sum_g weights[g] * sum_{i in group g} (a_i - b_i)^2` as a scalar, where
    /// group `g` covers the contiguous elements `[g*group, (g+1)*group)`.
    pub fn weighted_sq_diff(&mut self, a: Var, b: Var, group: usize, weights: Vec<f64>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "squared difference: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        if group == 0 || group * weights.len() != va.len() {
            return Err(Error::Shape(format!(
                "squared difference: {} groups of {} do not cover {} elements",
                weights.len(),
                group,
                va.len()
            )));
        }
        let mut total = 0.0;
        for (g, wg) in weights.iter().enumerate() {
            let r = g * group..(g + 1) * group;
            let s: f64 = va.data()[r.clone()]
                .iter()
                .zip(&vb.data()[r])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            total += wg * s;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSqDiff {
                a,
                b,
                group,
                weights,
            },
            needs,
        ))
    }

    /// Observed batch statistics of a batch-mode norm node.
    pub fn observed_stats(&self, v: Var) -> Option<ObservedStats> {
        match &self.nodes[v.0].op {
            Op::Norm {
                x, batch: true, ..
            } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4().ok()?;
                let (mean, var) = batch_moments(xv.data(), n, c, h * w);
                Some(ObservedStats {
                    mean,
                    var,
                    count: n * h * w,
                })
            }
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.needs(loss) {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, gy.scale(*s)),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let g: Vec<f64> = gy
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(gy.shape(), g)?);
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let (n, c, h, wd) = self.value(*x).dims4()?;
                let wt = self.value(*w);
                let (co, ci, kh, kw) = wt.dims4()?;
                let (_, _, oh, ow) = gy.dims4()?;
                let ck = ci * kh * kw;
                let ohw = oh * ow;
                if self.needs(*w) {
                    let mut gw = vec![0.0; co * ck];
                    for s in 0..n {
                        let dy = &gy.data()[s * co * ohw..(s + 1) * co * ohw];
                        let col = &cols[s * ck * ohw..(s + 1) * ck * ohw];
                        gemm(co, ohw, ck, dy, false, col, true, &mut gw, 1.0);
                    }
                    self.accumulate(grads, *w, Tensor::from_vec(wt.shape(), gw)?);
                }
                if self.needs(*x) {
                    let geom = ConvGeom {
                        c,
                        h,
                        w: wd,
                        kh,
                        kw,
                        stride: *stride,
                        pad: *pad,
                        oh,
                        ow,
                    };
                    let mut gx = vec![0.0; n * c * h * wd];
                    let mut dcol = vec![0.0; ck * ohw];
                    for s in 0..n {
                        let dy = &gy.data()[s * co * ohw..(s + 1) * co * ohw];
                        gemm(ck, co, ohw, wt.data(), true, dy, false, &mut dcol, 0.0);
                        col2im(&dcol, &geom, &mut gx[s * c * h * wd..(s + 1) * c * h * wd]);
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, wd], gx)?);
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let dy = gy.data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], sum_dy_xhat.clone())?);
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], sum_dy.clone())?);
                if self.needs(*x) {
                    let g = self.value(*gamma).data();
                    let mut gx = vec![0.0; dy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let k = g[ch] * inv_std[ch];
                            for i in off..off + hw {
                                gx[i] = if *batch {
                                    k * (dy[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], gx)?);
                }
            }
            Op::Upsample { x, fy, fx } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (oh, ow) = (h * fy, w * fx);
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gx[(p * h + oy / fy) * w + ox / fx] += gy.data()[(p * oh + oy) * ow + ox];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], gx)?);
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = gy.dims4()?;
                let hw = h * w;
                let mut c_off = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let start = (s * total_c + c_off) * hw;
                            gp.extend_from_slice(&gy.data()[start..start + pc * hw]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&[n, pc, h, w], gp)?);
                    }
                    c_off += pc;
                }
            }
            Op::Gram(x) => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4()?;
                let hw = h * w;
                let mut gx = vec![0.0; n * c * hw];
                let mut sym = vec![0.0; c * c];
                for s in 0..n {
                    let dg = &gy.data()[s * c * c..(s + 1) * c * c];
                    for i in 0..c {
                        for j in 0..c {
                            sym[i * c + j] = dg[i * c + j] + dg[j * c + i];
                        }
                    }
                    let f = &xt.data()[s * c * hw..(s + 1) * c * hw];
                    gemm(c, c, hw, &sym, false, f, false, &mut gx[s * c * hw..(s + 1) * c * hw], 0.0);
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], gx)?);
            }
            Op::WeightedSqDiff {
                a,
                b,
                group,
                weights,
            } => {
                let g0 = gy.item();
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = vec![0.0; va.len()];
                for (g, wg) in weights.iter().enumerate() {
                    for i in g * group..(g + 1) * group {
                        da[i] = 2.0 * wg * g0 * (va.data()[i] - vb.data()[i]);
                    }
                }
                if self.needs(*b) {
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(vb.shape(), db)?);
                }
                self.accumulate(grads, *a, Tensor::from_vec(va.shape(), da)?);
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient at `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn batch_moments(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            mean[ch] += x[off..off + hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            var[ch] += x[off..off + hw]
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * ohw;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * ohw;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += col[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape `m x k` and `op(b)`
/// of shape `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided m*k, k*n and m*n regions checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` w.r.t. every element of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() / scale < tol, "element {i}: {x} vs {y}");
        }
    }

    // Reduces any output to a scalar with fixed random weights so every
    // output element contributes to the gradient.
    fn probe(g: &mut Graph, y: Var, seed: u64) -> Var {
        let shape = g.value(y).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = g.constant(random(&shape, &mut rng));
        let len = g.value(y).len();
        g.weighted_sq_diff(y, target, len, vec![1.0]).unwrap()
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 5, 4], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, 2, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[2, 4, 3, 2]);
        for n in 0..2 {
            for co in 0..4 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut acc = 0.0;
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                        acc += x.data()[((n * 3 + ci) * 5 + iy as usize) * 4 + ix as usize]
                                            * w.data()[((co * 3 + ci) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                        }
                        let got = out.data()[((n * 4 + co) * 3 + oy) * 2 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 2, 5, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let eval = |x: &Tensor, w: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let y = g.conv2d(xv, wv, 2, 1).unwrap();
            let l = probe(&mut g, y, 9);
            (g, xv, wv, l)
        };
        let (g, xv, wv, l) = eval(&x, &w);
        let grads = g.backward(l).unwrap();
        let nx = numeric_grad(&x, |x| {
            let (g, _, _, l) = eval(x, &w);
            g.value(l).item()
        });
        let nw = numeric_grad(&w, |w| {
            let (g, _, _, l) = eval(&x, w);
            g.value(l).item()
        });
        assert_close(grads.get(xv).unwrap().data(), &nx, 1e-6);
        assert_close(grads.get(wv).unwrap().data(), &nw, 1e-6);
    }

    #[test]
    fn norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 2, 3, 2], &mut rng);
        let gamma = random(&[2], &mut rng);
        let beta = random(&[2], &mut rng);
        for stats in [
            NormStats::Batch,
            NormStats::Fixed {
                mean: vec![0.1, -0.2],
                var: vec![0.5, 2.0],
            },
        ] {
            let eval = |x: &Tensor, gm: &Tensor, bt: &Tensor| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone());
                let gv = g.leaf(gm.clone());
                let bv = g.leaf(bt.clone());
                let y = g.norm(xv, gv, bv, &stats, 1e-5).unwrap();
                let l = probe(&mut g, y, 4);
                (g, [xv, gv, bv], l)
            };
            let (g, vars, l) = eval(&x, &gamma, &beta);
            let grads = g.backward(l).unwrap();
            let nx = numeric_grad(&x, |x| {
                let (g, _, l) = eval(x, &gamma, &beta);
                g.value(l).item()
            });
            let ng = numeric_grad(&gamma, |gm| {
                let (g, _, l) = eval(&x, gm, &beta);
                g.value(l).item()
            });
            let nb = numeric_grad(&beta, |bt| {
                let (g, _, l) = eval(&x, &gamma, bt);
                g.value(l).item()
            });
            assert_close(grads.get(vars[0]).unwrap().data(), &nx, 1e-5);
            assert_close(grads.get(vars[1]).unwrap().data(), &ng, 1e-5);
            assert_close(grads.get(vars[2]).unwrap().data(), &nb, 1e-5);
        }
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[2, 2, 2, 3], &mut rng);
        let b = random(&[2, 3, 4, 3], &mut rng);
        let eval = |a: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let av = g.leaf(a.clone());
            let bv = g.leaf(b.clone());
            let up = g.upsample(av, 2, 1).unwrap();
            let r = g.relu(bv);
            let cat = g.concat(&[up, r]).unwrap();
            let s = g.scale(cat, 0.7);
            let gm = g.gram(s).unwrap();
            let l = probe(&mut g, gm, 6);
            (g, av, bv, l)
        };
        let (g, av, bv, l) = eval(&a, &b);
        let grads = g.backward(l).unwrap();
        let na = numeric_grad(&a, |a| {
            let (g, _, _, l) = eval(a, &b);
            g.value(l).item()
        });
        let nb = numeric_grad(&b, |b| {
            let (g, _, _, l) = eval(&a, b);
            g.value(l).item()
        });
        assert_close(grads.get(av).unwrap().data(), &na, 1e-5);
        assert_close(grads.get(bv).unwrap().data(), &nb, 1e-5);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 2.0));
        let d = g.detach(x);
        let y = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let l = g.weighted_sq_diff(y, d, 4, vec![1.0]).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap().data(), &[-2.0; 4]);
    }

    #[test]
    fn batch_norm_rejects_single_element() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let gm = g.constant(Tensor::full(&[1], 1.0));
        let bt = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(
            g.norm(x, gm, bt, &NormStats::Batch, 1e-5),
            Err(Error::Contract(_))
        ));
    }
}
