use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    /// `argmax[o]` is the flat input index routed to output `o`.
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        xs: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Silu(Var),
    Log(Var),
    Pow(Var, f64),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of differentiable operations in execution order.
///
/// Nodes are appended as ops run, so every node's inputs precede it.
/// [`Tape::backward`] walks the nodes once in reverse. A tape is built per
/// forward pass and discarded afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output extent of a strided window op.
fn out_dim(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + tap - pad` lands
/// inside `0..len`.
fn valid_range(len: usize, out: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + pad > tap {
        ((len + pad - tap - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects an [N, C, H, W] tensor"),
        }),
    }
}

/// Split a rank >= 2 shape around axis 1 into (outer, channels, inner).
fn channel_split(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("{op} needs a channel axis"),
        });
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Forward window max; also returns the winning input index per output.
pub(super) fn maxpool_impl(
    tx: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = dims4(tx, "maxpool2d")?;
    if k == 0 || stride == 0 {
        return Err(Error::Config("maxpool2d needs k >= 1 and stride >= 1".into()));
    }
    if 2 * pad > k {
        return Err(Error::Config(format!(
            "maxpool2d pad {pad} exceeds half the window {k}"
        )));
    }
    let (Some(oh), Some(ow)) = (out_dim(h, k, stride, pad), out_dim(w, k, stride, pad)) else {
        return Err(Error::InvalidShape {
            shape: tx.shape().to_vec(),
            reason: format!("maxpool2d window {k} larger than padded input"),
        });
    };
    let xd = tx.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let ys = (oy * stride).saturating_sub(pad);
            let ye = (oy * stride + k).saturating_sub(pad).min(h);
            for ox in 0..ow {
                let xs = (ox * stride).saturating_sub(pad);
                let xe = (ox * stride + k).saturating_sub(pad).min(w);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + ys * w + xs;
                for iy in ys..ye {
                    for ix in xs..xe {
                        let i = base + iy * w + ix;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(xd[best_i]);
                argmax.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input; gradients are tracked for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last `backward` calls w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grad(v)?;
        Some(Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Sigmoid linear unit, `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Pow(a, p), |x| x.powf(p))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Clamp into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// 2-D convolution over `[N, C, H, W]` with weight `[K, C, kh, kw]`
    /// and bias `[K]`. Kernel extents must be odd.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let [n, c, h, wd] = dims4(tx, "conv2d input")?;
        let [k, wc, kh, kw] = dims4(tw, "conv2d weight")?;
        if wc != c {
            return Err(mismatch("conv2d (input vs weight channels)", tx, tw));
        }
        if tb.shape() != [k] {
            return Err(mismatch("conv2d (weight vs bias)", tw, tb));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape {
                shape: tw.shape().to_vec(),
                reason: "conv2d kernel extents must be odd".into(),
            });
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let (Some(oh), Some(ow)) = (out_dim(h, kh, stride, pad), out_dim(wd, kw, stride, pad))
        else {
            return Err(mismatch("conv2d (kernel larger than padded input)", tx, tw));
        };

        let (xd, wdata, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![0.0; n * k * oh * ow];
        for ni in 0..n {
            for ki in 0..k {
                let obase = (ni * k + ki) * oh * ow;
                out[obase..obase + oh * ow].fill(bd[ki]);
                for ci in 0..c {
                    let xbase = (ni * c + ci) * h * wd;
                    for ky in 0..kh {
                        let (y0, y1) = valid_range(h, oh, ky, stride, pad);
                        for kx in 0..kw {
                            let wv = wdata[((ki * c + ci) * kh + ky) * kw + kx];
                            let (x0, x1) = valid_range(wd, ow, kx, stride, pad);
                            for oy in y0..y1 {
                                let iy = oy * stride + ky - pad;
                                let orow = obase + oy * ow;
                                let irow = xbase + iy * wd;
                                for ox in x0..x1 {
                                    out[orow + ox] += wv * xd[irow + ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, k, oh, ow], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Window max over `[N, C, H, W]`. Padding cells never win. On ties the
    /// first maximal element in row-major scan order receives the gradient.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (value, argmax) = maxpool_impl(self.value(x), k, stride, pad)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = dims4(tx, "upsample")?;
        if factor == 0 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xd = tx.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for oy in 0..oh {
                let row = plane * h * w + (oy / factor) * w;
                out.extend((0..ow).map(|ox| xd[row + ox / factor]));
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample { x, factor }, rg))
    }

    /// Concatenate along axis 1. All other extents must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let t0 = self.value(first);
        let (outer, _, inner) = channel_split(t0, "concat")?;
        let mut total_c = 0;
        for &v in xs {
            let t = self.value(v);
            let (o, c, i) = channel_split(t, "concat")?;
            if o != outer || i != inner || t.shape()[2..] != t0.shape()[2..] {
                return Err(mismatch("concat", t0, t));
            }
            total_c += c;
        }
        let mut out = Vec::with_capacity(outer * total_c * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = t0.shape().to_vec();
        shape[1] = total_c;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, rg))
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, c, inner) = channel_split(t, "slice")?;
        if start + len > c || len == 0 {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("channel slice {start}..{} out of range", start + len),
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * c + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[1] = len;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { x, start }, rg))
    }

    /// Populate gradients of `loss` w.r.t. every tracked ancestor.
    /// Repeated calls accumulate until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                slot => *slot = Some(g.clone()),
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();

        // Accumulate a contribution into the adjoint of `v` if it is tracked.
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                send(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                send(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                });
                send(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                });
            }
            Op::Scale(a, s) => {
                send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s));
            }
            Op::AddScalar(a) => {
                send(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sigmoid(a) => {
                send(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * out[j] * (1.0 - out[j]);
                    }
                });
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                send(*a, &mut |d| {
                    for j in 0..d.len() {
                        let s = sigmoid(av[j]);
                        d[j] += g[j] * s * (1.0 + av[j] * (1.0 - s));
                    }
                });
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                send(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / av[j];
                    }
                });
            }
            Op::Pow(a, p) => {
                let av = self.value(*a).data();
                let p = *p;
                send(*a, &mut |d| {
                    if p == 0.0 {
                        return;
                    }
                    for j in 0..d.len() {
                        d[j] += g[j] * p * av[j].powf(p - 1.0);
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                send(*a, &mut |d| {
                    for j in 0..d.len() {
                        let s = if av[j] > 0.0 {
                            1.0
                        } else if av[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d[j] += g[j] * s;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                send(*a, &mut |d| {
                    for j in 0..d.len() {
                        if av[j] >= *lo && av[j] <= *hi {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                send(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                send(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MaxPool { x, argmax } => {
                send(*x, &mut |d| {
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += g[o];
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let [n, c, h, w] = dims4(self.value(*x), "upsample").expect("checked");
                let (oh, ow) = (h * factor, w * factor);
                send(*x, &mut |d| {
                    for plane in 0..n * c {
                        for oy in 0..oh {
                            let row = plane * h * w + (oy / factor) * w;
                            let grow = (plane * oh + oy) * ow;
                            for ox in 0..ow {
                                d[row + ox / factor] += g[grow + ox];
                            }
                        }
                    }
                });
            }
            Op::Concat { xs } => {
                let (outer, total_c, inner) = channel_split(&node.value, "concat").expect("checked");
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    send(v, &mut |d| {
                        for o in 0..outer {
                            let src = (o * total_c + offset) * inner;
                            let dst = o * c * inner;
                            for j in 0..c * inner {
                                d[dst + j] += g[src + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let (outer, c, inner) = channel_split(self.value(*x), "slice").expect("checked");
                let len = node.value.shape()[1];
                send(*x, &mut |d| {
                    for o in 0..outer {
                        let dst = (o * c + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            d[dst + j] += g[src + j];
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_backward(*x, *w, *b, *stride, *pad, g, &mut send),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        g: &[f64],
        send: &mut impl FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let (tx, tw) = (self.value(x), self.value(w));
        let [n, c, h, wd] = dims4(tx, "conv2d").expect("checked");
        let [k, _, kh, kw] = dims4(tw, "conv2d").expect("checked");
        let oh = out_dim(h, kh, stride, pad).expect("checked");
        let ow = out_dim(wd, kw, stride, pad).expect("checked");
        let (xd, wdata) = (tx.data(), tw.data());

        send(b, &mut |db| {
            for ni in 0..n {
                for (ki, d) in db.iter_mut().enumerate().take(k) {
                    let base = (ni * k + ki) * oh * ow;
                    *d += g[base..base + oh * ow].iter().sum::<f64>();
                }
            }
        });

        // Shared loop nest; `f` receives (weight index, input index, output index).
        let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
            for ni in 0..n {
                for ki in 0..k {
                    let obase = (ni * k + ki) * oh * ow;
                    for ci in 0..c {
                        let xbase = (ni * c + ci) * h * wd;
                        for ky in 0..kh {
                            let (y0, y1) = valid_range(h, oh, ky, stride, pad);
                            for kx in 0..kw {
                                let wi = ((ki * c + ci) * kh + ky) * kw + kx;
                                let (x0, x1) = valid_range(wd, ow, kx, stride, pad);
                                for oy in y0..y1 {
                                    let iy = oy * stride + ky - pad;
                                    for ox in x0..x1 {
                                        f(
                                            wi,
                                            xbase + iy * wd + ox * stride + kx - pad,
                                            obase + oy * ow + ox,
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };

        send(w, &mut |dw| visit(&mut |wi, xi, oi| dw[wi] += g[oi] * xd[xi]));
        send(x, &mut |dx| visit(&mut |wi, xi, oi| dx[xi] += g[oi] * wdata[wi]));
    }
}
