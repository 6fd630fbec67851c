use std::f64::consts::PI;

use super::kernels::{self, Conv2dGeometry};
use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl Conv2dConfig {
    /// Stride-1 zero padding that preserves both spatial axes for an odd kernel.
    pub fn same(kernel: (usize, usize), dilation: (usize, usize)) -> Self {
        Self {
            padding: (dilation.0 * (kernel.0 - 1) / 2, dilation.1 * (kernel.1 - 1) / 2),
            dilation,
            ..Self::default()
        }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Per-channel statistics observed by a training-mode batch norm. `var` is
/// the unbiased estimate, ready for a running-average update.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// `outer × len × inner` view of a tensor around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    /// Keeps the inner tanh for the backward pass.
    Gelu(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    SumAxis(Var, AxisSplit),
    Softmax(Var, AxisSplit),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow(Var, AxisSplit, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeometry,
    },
    AvgPool {
        x: Var,
        planes: usize,
        hw: (usize, usize),
        window: (usize, usize),
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        batch_stats: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
    },
    FdyMix {
        basis: Var,
        att: Var,
        k: usize,
    },
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of operations recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward sweep, keyed by leaf and parameter nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

const BCE_CLAMP: f64 = 1e-7;

/// tanh through `expm1`; a few times cheaper than libm's tanh here and
/// accurate to a couple of ulps.
fn fast_tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp_m1();
    (-e / (2.0 + e)).copysign(u)
}

/// Inner tanh of the GELU approximation.
fn gelu_inner(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    fast_tanh(c * (x + 0.044715 * x * x * x))
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "all",
            format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_axis(shape: &[usize], axis: usize, what: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(
            axis.to_string(),
            format!("{what}: axis out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing on it can be differentiated.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Snapshot the parameter `id` onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: &str) -> Result<Var> {
        let idx = store
            .index_of(id)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{id}`")))?;
        let value = store.leaf(idx).value.clone();
        Ok(self.push(value, Op::Param(idx), true))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::new(ta.shape().to_vec(), data).expect("shape preserved"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let inner: Vec<f64> = x.data().iter().map(|&v| gelu_inner(v)).collect();
        let y = x.data().iter().zip(&inner).map(|(&x, t)| 0.5 * x * (1.0 + t)).collect();
        let t = Tensor::new(x.shape().to_vec(), y).expect("same shape");
        let rg = self.rg(a);
        let cache = if rg { inner } else { Vec::new() };
        self.push(t, Op::Gelu(a, cache), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(fast_tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it. A rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "sum_axis")?;
        let sp = AxisSplit::new(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; sp.outer * sp.inner];
        for o in 0..sp.outer {
            for l in 0..sp.len {
                let src = &x[(o * sp.len + l) * sp.inner..][..sp.inner];
                add_into(&mut out[o * sp.inner..(o + 1) * sp.inner], src);
            }
        }
        let mut oshape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if oshape.is_empty() {
            oshape.push(1);
        }
        let t = Tensor::new(oshape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SumAxis(a, sp), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(a), axis, "mean_axis")?;
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "softmax")?;
        let sp = AxisSplit::new(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..sp.outer {
            for i in 0..sp.inner {
                let idx = |l: usize| (o * sp.len + l) * sp.inner + i;
                let m = (0..sp.len).map(|l| x[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..sp.len {
                    let e = (x[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..sp.len {
                    out[idx(l)] /= z;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a, sp), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("perm", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let out = permute_data(self.value(a).data(), &shape, perm);
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let t = Tensor::new(oshape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis, "concat")?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::dim(
                    axis.to_string(),
                    format!("concat: shape {s:?} incompatible with {base:?}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        let t = Tensor::new(oshape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "narrow")?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                axis.to_string(),
                format!("narrow [{start}, {}) outside size {}", start + len, shape[axis]),
            ));
        }
        let sp = AxisSplit::new(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(sp.outer * len * sp.inner);
        for o in 0..sp.outer {
            out.extend_from_slice(&x[(o * sp.len + start) * sp.inner..(o * sp.len + start + len) * sp.inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let t = Tensor::new(oshape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Narrow(a, sp, start), rg))
    }

    /// Cross-correlation with zero padding. `x: [B,Cin,H,W]`,
    /// `w: [Cout, Cin/groups, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: Conv2dConfig) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("input", format!("conv2d expects rank-4 input, got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(Error::dim("weight", format!("conv2d expects rank-4 weight, got {ws:?}")));
        }
        let g = cfg.groups;
        if g == 0 || !xs[1].is_multiple_of(g) || !ws[0].is_multiple_of(g) {
            return Err(Error::dim(
                "channel",
                format!("groups {g} must divide Cin {} and Cout {}", xs[1], ws[0]),
            ));
        }
        if ws[1] != xs[1] / g {
            return Err(Error::dim(
                "channel",
                format!("weight expects {} input channels per group, input has {}", ws[1], xs[1] / g),
            ));
        }
        if cfg.stride.0 == 0 || cfg.stride.1 == 0 || cfg.dilation.0 == 0 || cfg.dilation.1 == 0 {
            return Err(Error::Contract("conv2d stride and dilation must be >= 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim("bias", format!("bias {:?} does not match Cout {}", self.shape(b), ws[0])));
            }
        }
        let geom = Conv2dGeometry {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            in_h: xs[2],
            in_w: xs[3],
            kernel: (ws[2], ws[3]),
            stride: cfg.stride,
            padding: cfg.padding,
            dilation: cfg.dilation,
            groups: g,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        if oh == 0 {
            return Err(Error::dim("frame", format!("kernel {} (dilation {}) does not fit padded size {}", ws[2], cfg.dilation.0, xs[2] + 2 * cfg.padding.0)));
        }
        if ow == 0 {
            return Err(Error::dim("frequency", format!("kernel {} (dilation {}) does not fit padded size {}", ws[3], cfg.dilation.1, xs[3] + 2 * cfg.padding.1)));
        }
        let mut out = vec![0.0; xs[0] * ws[0] * oh * ow];
        kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            &mut out,
        );
        let t = Tensor::new(vec![xs[0], ws[0], oh, ow], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Mean over non-overlapping `window` tiles of the last two axes,
    /// dropping any trailing remainder.
    pub fn avg_pool2d(&mut self, x: Var, window: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("input", "avg_pool2d needs at least two axes"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if window.0 == 0 || window.0 > h {
            return Err(Error::dim("frame", format!("pool window {} larger than axis {h}", window.0)));
        }
        if window.1 == 0 || window.1 > w {
            return Err(Error::dim("frequency", format!("pool window {} larger than axis {w}", window.1)));
        }
        let planes: usize = s[..s.len() - 2].iter().product();
        let (oh, ow) = (h / window.0, w / window.1);
        let mut out = vec![0.0; planes * oh * ow];
        kernels::avg_pool2d_forward(self.value(x).data(), planes, (h, w), window, &mut out);
        let mut oshape = s;
        let r = oshape.len();
        oshape[r - 2] = oh;
        oshape[r - 1] = ow;
        let t = Tensor::new(oshape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::AvgPool { x, planes, hw: (h, w), window }, rg))
    }

    /// Batch normalization over axis 1 of a `[B, C, ...]` tensor.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the given running `(mean, var)` normalize the input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("channel", "batch_norm needs a channel axis"));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("channel", format!("affine terms must have shape [{c}]")));
        }
        let inner: usize = s[2..].iter().product();
        let n = s[0] * inner;
        let xd = self.value(x).data();
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::dim("channel", "running statistics length mismatch"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let vals = (0..s[0]).flat_map(|b| xd[(b * c + ch) * inner..][..inner].iter());
                    *m = vals.clone().sum::<f64>() / n as f64;
                    *v = vals.map(|&x| (x - *m) * (x - *m)).sum::<f64>() / n as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|&v| if n > 1 { v * n as f64 / (n - 1) as f64 } else { v })
                    .collect();
                let stats = BatchNormStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..s[0] {
            for ch in 0..c {
                let o = (b * c + ch) * inner;
                let (m, is, ga, be) = (mean[ch], invstd[ch], gd[ch], bd[ch]);
                for (d, &v) in out[o..o + inner].iter_mut().zip(&xd[o..o + inner]) {
                    *d = ga * (v - m) * is + be;
                }
            }
        }
        let t = Tensor::new(s, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch_stats = stats.is_some();
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// `y = x·wᵀ + b` over the last axis; `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().expect("tensor rank >= 1");
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::dim(
                "feature",
                format!("linear weight {ws:?} does not accept input width {din}"),
            ));
        }
        let dout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim("bias", format!("linear bias must be [{dout}]")));
            }
        }
        let rows = xs.iter().product::<usize>() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bd);
            }
        }
        kernels::gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            (din, 1),
            self.value(w).data(),
            (1, din),
            1.0,
            &mut out,
            (dout, 1),
        );
        let mut oshape = xs;
        *oshape.last_mut().expect("rank >= 1") = dout;
        let t = Tensor::new(oshape, out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Linear { x, w, b, rows }, rg))
    }

    /// Frequency-wise mixture of `k` stacked basis responses.
    ///
    /// `basis: [B, k·Cout, T, F]` holds the k responses back to back along
    /// the channel axis, `att: [B, k, F]`; output
    /// `[b, c, t, f] = Σ_k att[b, k, f] · basis[b, k·Cout + c, t, f]`.
    pub fn fdy_mix(&mut self, basis: Var, att: Var, k: usize) -> Result<Var> {
        let bs = self.shape(basis).to_vec();
        let a_s = self.shape(att).to_vec();
        if bs.len() != 4 || k == 0 || !bs[1].is_multiple_of(k) {
            return Err(Error::dim("channel", format!("basis {bs:?} is not a stack of {k} responses")));
        }
        if a_s != [bs[0], k, bs[3]] {
            return Err(Error::dim(
                "frequency",
                format!("attention {a_s:?} does not match [{}, {k}, {}]", bs[0], bs[3]),
            ));
        }
        let (nb, cout, t, f) = (bs[0], bs[1] / k, bs[2], bs[3]);
        let yd = self.value(basis).data();
        let ad = self.value(att).data();
        let mut out = vec![0.0; nb * cout * t * f];
        for b in 0..nb {
            for kk in 0..k {
                let w = &ad[(b * k + kk) * f..][..f];
                for c in 0..cout {
                    let src = &yd[((b * k * cout) + kk * cout + c) * t * f..][..t * f];
                    let dst = &mut out[(b * cout + c) * t * f..][..t * f];
                    for ti in 0..t {
                        for ((d, s), wv) in dst[ti * f..(ti + 1) * f].iter_mut().zip(&src[ti * f..(ti + 1) * f]).zip(w) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        let tt = Tensor::new(vec![nb, cout, t, f], out)?;
        let rg = self.rg(basis) || self.rg(att);
        Ok(self.push(tt, Op::FdyMix { basis, att, k }, rg))
    }

    /// Mean binary cross-entropy of probabilities `pred` against fixed
    /// targets; predictions are clamped to `[1e-7, 1 − 1e-7]`.
    pub fn bce_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        same_shape(self.value(pred), target, "bce")?;
        let p = self.value(pred).data();
        let n = p.len() as f64;
        let loss = p
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.grad_enabled {
            return Err(Error::Contract("backward on a no-grad graph".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut kept: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => kept[i] = Some(g),
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { grads: kept })
    }

    /// Backward sweep that accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(self, store)
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    add_into(d, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.grad_buf(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    add_into(d, g);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.grad_buf(grads, *a) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Gelu(a, inner) => {
                let x = self.value(*a).data();
                if let Some(d) = self.grad_buf(grads, *a) {
                    for (((d, g), x), t) in d.iter_mut().zip(g).zip(x).zip(inner) {
                        *d += g * gelu_grad(*x, *t);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis(a, sp) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    for o in 0..sp.outer {
                        let src = &g[o * sp.inner..(o + 1) * sp.inner];
                        for l in 0..sp.len {
                            add_into(&mut d[(o * sp.len + l) * sp.inner..][..sp.inner], src);
                        }
                    }
                }
            }
            Op::Softmax(a, sp) => {
                let y = out.data();
                if let Some(d) = self.grad_buf(grads, *a) {
                    for o in 0..sp.outer {
                        for i in 0..sp.inner {
                            let idx = |l: usize| (o * sp.len + l) * sp.inner + i;
                            let dot: f64 = (0..sp.len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..sp.len {
                                d[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Permute(a, perm) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_data(g, out.shape(), &inv);
                    add_into(d, &back);
                }
            }
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(d) = self.grad_buf(grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow(a, sp, start) => {
                let len = out.shape().iter().product::<usize>() / (sp.outer * sp.inner);
                if let Some(d) = self.grad_buf(grads, *a) {
                    for o in 0..sp.outer {
                        let dst = &mut d[(o * sp.len + start) * sp.inner..][..len * sp.inner];
                        add_into(dst, &g[o * len * sp.inner..(o + 1) * len * sp.inner]);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = self.rg(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.rg(*w).then(|| vec![0.0; wv.len()]);
                let mut db = b.filter(|b| self.rg(*b)).map(|b| vec![0.0; self.value(b).numel()]);
                kernels::conv2d_backward(
                    xv,
                    wv,
                    g,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let (Some(src), Some(d)) = (dx, self.grad_buf(grads, *x)) {
                    add_into(d, &src);
                }
                if let (Some(src), Some(d)) = (dw, self.grad_buf(grads, *w)) {
                    add_into(d, &src);
                }
                if let (Some(src), Some(b)) = (db, b) {
                    if let Some(d) = self.grad_buf(grads, *b) {
                        add_into(d, &src);
                    }
                }
            }
            Op::AvgPool { x, planes, hw, window } => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    kernels::avg_pool2d_backward(g, *planes, *hw, *window, d);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            } => {
                let s = out.shape();
                let (nb, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let n = (nb * inner) as f64;
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..nb {
                    for ch in 0..c {
                        let o = (b * c + ch) * inner;
                        for (gv, xv) in g[o..o + inner].iter().zip(&xd[o..o + inner]) {
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * (xv - mean[ch]) * invstd[ch];
                        }
                    }
                }
                if let Some(d) = self.grad_buf(grads, *x) {
                    for b in 0..nb {
                        for ch in 0..c {
                            let o = (b * c + ch) * inner;
                            let (m, is, ga) = (mean[ch], invstd[ch], gd[ch]);
                            for ((dv, gv), xv) in d[o..o + inner].iter_mut().zip(&g[o..o + inner]).zip(&xd[o..o + inner]) {
                                *dv += if *batch_stats {
                                    let xhat = (xv - m) * is;
                                    ga * is / n * (n * gv - sum_g[ch] - xhat * sum_gx[ch])
                                } else {
                                    ga * is * gv
                                };
                            }
                        }
                    }
                }
                if let Some(d) = self.grad_buf(grads, *gamma) {
                    add_into(d, &sum_gx);
                }
                if let Some(d) = self.grad_buf(grads, *beta) {
                    add_into(d, &sum_g);
                }
            }
            Op::Linear { x, w, b, rows } => {
                let rows = *rows;
                let ws = self.shape(*w);
                let (dout, din) = (ws[0], ws[1]);
                if let Some(d) = self.grad_buf(grads, *x) {
                    kernels::gemm(rows, dout, din, g, (dout, 1), self.value(*w).data(), (din, 1), 1.0, d, (din, 1));
                }
                if let Some(d) = self.grad_buf(grads, *w) {
                    kernels::gemm(dout, rows, din, g, (1, dout), self.value(*x).data(), (din, 1), 1.0, d, (din, 1));
                }
                if let Some(b) = b {
                    if let Some(d) = self.grad_buf(grads, *b) {
                        for r in 0..rows {
                            add_into(d, &g[r * dout..(r + 1) * dout]);
                        }
                    }
                }
            }
            Op::FdyMix { basis, att, k } => {
                let bs = self.shape(*basis);
                let (nb, cout, t, f) = (bs[0], bs[1] / k, bs[2], bs[3]);
                let yd = self.value(*basis).data();
                let ad = self.value(*att).data();
                if let Some(d) = self.grad_buf(grads, *basis) {
                    for b in 0..nb {
                        for kk in 0..*k {
                            let w = &ad[(b * k + kk) * f..][..f];
                            for c in 0..cout {
                                let gs = &g[(b * cout + c) * t * f..][..t * f];
                                let dst = &mut d[((b * k * cout) + kk * cout + c) * t * f..][..t * f];
                                for ti in 0..t {
                                    for ((dv, gv), wv) in dst[ti * f..(ti + 1) * f].iter_mut().zip(&gs[ti * f..(ti + 1) * f]).zip(w) {
                                        *dv += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(d) = self.grad_buf(grads, *att) {
                    for b in 0..nb {
                        for kk in 0..*k {
                            let dst = &mut d[(b * k + kk) * f..][..f];
                            for c in 0..cout {
                                let gs = &g[(b * cout + c) * t * f..][..t * f];
                                let src = &yd[((b * k * cout) + kk * cout + c) * t * f..][..t * f];
                                for ti in 0..t {
                                    for ((dv, gv), sv) in dst.iter_mut().zip(&gs[ti * f..(ti + 1) * f]).zip(&src[ti * f..(ti + 1) * f]) {
                                        *dv += gv * sv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                if let Some(d) = self.grad_buf(grads, *pred) {
                    for ((dv, &pv), &t) in d.iter_mut().zip(p).zip(target) {
                        if pv > BCE_CLAMP && pv < 1.0 - BCE_CLAMP {
                            *dv += g[0] * (-t / pv + (1.0 - t) / (1.0 - pv)) / n;
                        }
                    }
                }
            }
        }
    }
}

fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let ostrides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&ostrides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < oshape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

impl Gradients {
    /// Gradient of a differentiable leaf or parameter node (zeros when the
    /// loss does not depend on it); `None` for constants and interior nodes.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        let node = &graph.nodes[v.0];
        if !node.requires_grad || !matches!(node.op, Op::Leaf | Op::Param(_)) {
            return None;
        }
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(graph.shape(v).to_vec(), g.clone()).expect("grad matches node shape"),
            None => Tensor::zeros(graph.shape(v)),
        })
    }

    /// Add every parameter gradient into the matching store leaf.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) -> Result<()> {
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Param(idx), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*idx, g)?;
            }
        }
        Ok(())
    }
}
