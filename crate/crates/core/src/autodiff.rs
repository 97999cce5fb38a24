//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse and accumulates
//! vector-Jacobian products into every node that requires a gradient.
//!
//! Image tensors use `[height, width, channels]` layout; convolution kernels
//! use `[out_channels, in_channels, k, k]` with odd `k`.
//!
//! ```
//! use shadowstorm::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]), true);
//! let n = tape.l2norm(x);
//! tape.backward(n).unwrap();
//! assert_eq!(tape.value(n).item(), 5.0);
//! assert_eq!(tape.grad(x).unwrap(), &[0.6, 0.8]);
//! ```

use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardTwice,
}

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(AutodiffError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Normalized separable blur kernel. Near the border each 1-D pass divides by
/// the sum of in-bounds weights, so a constant image is a fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn boxed(radius: usize) -> Self {
        Self {
            weights: vec![1.0; 2 * radius + 1],
        }
    }

    pub fn gaussian(radius: usize, sigma: f64) -> Self {
        let r = radius as isize;
        Self {
            weights: (-r..=r)
                .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
                .collect(),
        }
    }

    pub fn radius(&self) -> usize {
        self.weights.len() / 2
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Sqrt(Var),
    Conv2d { input: Var, kernel: Var, bias: Option<Var> },
    AvgPool(Var, usize),
    Blur(Var, Rc<BlurKernel>),
    Sum(Var),
    SqNorm(Var),
    L2Norm(Var),
    ChannelMean(Var),
    ExpandChannels(Var),
    Broadcast(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitives for one forward pass. Single-threaded; build one tape
/// per worker.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn hwc(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(shape_err(op, t.shape(), &[0, 0, 0])),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` requires one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| Tensor {
            shape: self.shape(v).to_vec(),
            data: g.to_vec(),
        })
    }

    /// Which side of its kink every relu and clamp input falls on, in
    /// recording order. Two evaluations of the same graph with equal patterns
    /// lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => out.extend(self.value(a).data().iter().map(|&x| i8::from(x > 0.0))),
                Op::Clamp(a, lo, hi) => out.extend(self.value(a).data().iter().map(|&x| {
                    if x <= lo {
                        -1
                    } else if x >= hi {
                        1
                    } else {
                        0
                    }
                })),
                _ => {}
            }
        }
        out
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, mk, rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, mk: Op) -> Var {
        let ta = self.value(a);
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, mk, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Clamp into `[lo, hi]`. Gradient passes straight through strictly inside
    /// the interval and is zero at or beyond either bound.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        self.clamp(a, 0.0, 1.0)
    }

    /// Element-wise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SqNorm(a), rg)
    }

    /// Euclidean norm. Its gradient at the origin is the zero vector.
    pub fn l2norm(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s.sqrt()), Op::L2Norm(a), rg)
    }

    /// `[h, w, c] -> [h, w, 1]` mean over channels.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (h, w, c) = hwc("channel_mean", t)?;
        let data = t
            .data()
            .chunks_exact(c)
            .map(|px| px.iter().sum::<f64>() / c as f64)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![h, w, 1],
                data,
            },
            Op::ChannelMean(a),
            rg,
        ))
    }

    /// `[h, w, 1] -> [h, w, channels]` by replication.
    pub fn expand_channels(&mut self, a: Var, channels: usize) -> Result<Var> {
        let t = self.value(a);
        let (h, w, c) = hwc("expand_channels", t)?;
        if c != 1 || channels == 0 {
            return Err(shape_err("expand_channels", t.shape(), &[h, w, channels]));
        }
        let data = t
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, channels))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![h, w, channels],
                data,
            },
            Op::ExpandChannels(a),
            rg,
        ))
    }

    /// Replicates a scalar to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if !t.is_scalar() {
            return Err(shape_err("broadcast", t.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), vec![t.item(); shape.iter().product()])
            .map_err(|_| shape_err("broadcast", &[1], shape))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Broadcast(a), rg))
    }

    /// Stride-1 cross-correlation with zero padding to the input size.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (x, k) = (self.value(input), self.value(kernel));
        let (h, w, cin) = hwc("conv2d", x)?;
        let (cout, kcin, kh, kw) = match *k.shape() {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(shape_err("conv2d", x.shape(), k.shape())),
        };
        if kcin != cin || kh != kw || kh % 2 == 0 {
            return Err(shape_err("conv2d", x.shape(), k.shape()));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(shape_err("conv2d", k.shape(), self.value(b).shape()));
            }
        }
        let pad = kh / 2;
        let mut out = vec![0.0; h * w * cout];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for px in out.chunks_exact_mut(cout) {
                px.copy_from_slice(bd);
            }
        }
        let (xd, kd) = (x.data(), k.data());
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                for ky in 0..kh {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    for kx in 0..kw {
                        let sx = xx + kx;
                        if sx < pad || sx - pad >= w {
                            continue;
                        }
                        let sx = sx - pad;
                        let src = &xd[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                        for (oc, ov) in o.iter_mut().enumerate() {
                            let kbase = ((oc * cin) * kh + ky) * kw + kx;
                            let mut acc = 0.0;
                            for (ic, &sv) in src.iter().enumerate() {
                                acc += kd[kbase + ic * kh * kw] * sv;
                            }
                            *ov += acc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: vec![h, w, cout],
                data: out,
            },
            Op::Conv2d { input, kernel, bias },
            rg,
        ))
    }

    /// Non-overlapping `size x size` average pooling; trailing rows/columns
    /// that do not fill a window are dropped.
    pub fn avg_pool(&mut self, a: Var, size: usize) -> Result<Var> {
        let t = self.value(a);
        let (h, w, c) = hwc("avg_pool", t)?;
        if size == 0 || size > h || size > w {
            return Err(shape_err("avg_pool", t.shape(), &[size, size]));
        }
        let (oh, ow) = (h / size, w / size);
        let norm = 1.0 / (size * size) as f64;
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh * size {
            for x in 0..ow * size {
                let dst = ((y / size) * ow + x / size) * c;
                for ch in 0..c {
                    out[dst + ch] += t.data()[(y * w + x) * c + ch] * norm;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![oh, ow, c],
                data: out,
            },
            Op::AvgPool(a, size),
            rg,
        ))
    }

    /// Per-channel normalized separable blur (see [`BlurKernel`]).
    pub fn blur(&mut self, a: Var, kernel: &BlurKernel) -> Result<Var> {
        let t = self.value(a);
        let (h, w, c) = hwc("blur", t)?;
        let rows = blur_pass(t.data(), h, w, c, &kernel.weights, Axis::Width, false);
        let data = blur_pass(&rows, h, w, c, &kernel.weights, Axis::Height, false);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![h, w, c],
                data,
            },
            Op::Blur(a, Rc::new(kernel.clone())),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every node that requires a gradient
    /// ends up holding d(loss)/d(node).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        // drop gradients of nodes that never asked for one
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            } else if g.is_none() {
                *g = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.accumulate(b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.accumulate(b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let bv = self.value(b).data().to_vec();
                let av = self.value(a).data().to_vec();
                self.accumulate(a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.value(b).data().to_vec();
                let av = self.value(a).data().to_vec();
                self.accumulate(a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / bv[i];
                    }
                });
                self.accumulate(b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += s * y)),
            Op::AddScalar(a) => self.accumulate(a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)),
            Op::Relu(a) => {
                let av = self.value(a).data().to_vec();
                self.accumulate(a, |ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(a).data().to_vec();
                self.accumulate(a, |ga| {
                    for i in 0..ga.len() {
                        if av[i] > lo && av[i] < hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sqrt(a) => {
                let out = self.nodes[idx].value.data().to_vec();
                self.accumulate(a, |ga| {
                    for i in 0..ga.len() {
                        if out[i] > 0.0 {
                            ga[i] += g[i] * 0.5 / out[i];
                        }
                    }
                });
            }
            Op::Sum(a) => self.accumulate(a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::SqNorm(a) => {
                let av = self.value(a).data().to_vec();
                self.accumulate(a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += 2.0 * av[i] * g[0];
                    }
                });
            }
            Op::L2Norm(a) => {
                let norm = self.nodes[idx].value.item();
                if norm > 0.0 {
                    let av = self.value(a).data().to_vec();
                    self.accumulate(a, |ga| {
                        for i in 0..ga.len() {
                            ga[i] += av[i] / norm * g[0];
                        }
                    });
                }
            }
            Op::ChannelMean(a) => {
                let c = self.shape(a)[2];
                let inv = 1.0 / c as f64;
                self.accumulate(a, |ga| {
                    for (px, &gv) in ga.chunks_exact_mut(c).zip(g) {
                        px.iter_mut().for_each(|x| *x += gv * inv);
                    }
                });
            }
            Op::ExpandChannels(a) => {
                let c = self.nodes[idx].value.shape()[2];
                self.accumulate(a, |ga| {
                    for (x, px) in ga.iter_mut().zip(g.chunks_exact(c)) {
                        *x += px.iter().sum::<f64>();
                    }
                });
            }
            Op::Broadcast(a) => {
                let s: f64 = g.iter().sum();
                self.accumulate(a, |ga| ga[0] += s);
            }
            Op::Conv2d { input, kernel, bias } => self.conv2d_backward(idx, input, kernel, bias, g),
            Op::AvgPool(a, size) => {
                let (h, w, c) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let ow = w / size;
                let oh = h / size;
                let norm = 1.0 / (size * size) as f64;
                self.accumulate(a, |ga| {
                    for y in 0..oh * size {
                        for x in 0..ow * size {
                            let src = ((y / size) * ow + x / size) * c;
                            for ch in 0..c {
                                ga[(y * w + x) * c + ch] += g[src + ch] * norm;
                            }
                        }
                    }
                });
            }
            Op::Blur(a, kernel) => {
                let (h, w, c) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let cols = blur_pass(g, h, w, c, &kernel.weights, Axis::Height, true);
                let back = blur_pass(&cols, h, w, c, &kernel.weights, Axis::Width, true);
                self.accumulate(a, |ga| ga.iter_mut().zip(&back).for_each(|(x, &y)| *x += y));
            }
        }
    }

    fn conv2d_backward(&mut self, _idx: usize, input: Var, kernel: Var, bias: Option<Var>, g: &[f64]) {
        let (h, w, cin) = (self.shape(input)[0], self.shape(input)[1], self.shape(input)[2]);
        let kshape = self.shape(kernel).to_vec();
        let (cout, kh, kw) = (kshape[0], kshape[2], kshape[3]);
        let pad = kh / 2;
        let xd = self.value(input).data().to_vec();
        let kd = self.value(kernel).data().to_vec();
        let need_x = self.rg(input);
        let need_k = self.rg(kernel);
        let mut gx = vec![0.0; if need_x { xd.len() } else { 0 }];
        let mut gk = vec![0.0; if need_k { kd.len() } else { 0 }];
        for y in 0..h {
            for xx in 0..w {
                let go = &g[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                for ky in 0..kh {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    for kx in 0..kw {
                        let sx = xx + kx;
                        if sx < pad || sx - pad >= w {
                            continue;
                        }
                        let sx = sx - pad;
                        let sbase = (sy * w + sx) * cin;
                        for (oc, &gv) in go.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let kbase = ((oc * cin) * kh + ky) * kw + kx;
                            for ic in 0..cin {
                                let ki = kbase + ic * kh * kw;
                                if need_x {
                                    gx[sbase + ic] += kd[ki] * gv;
                                }
                                if need_k {
                                    gk[ki] += xd[sbase + ic] * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(input, |ga| ga.iter_mut().zip(&gx).for_each(|(x, &y)| *x += y));
        }
        if need_k {
            self.accumulate(kernel, |ga| ga.iter_mut().zip(&gk).for_each(|(x, &y)| *x += y));
        }
        if let Some(b) = bias {
            self.accumulate(b, |gb| {
                for px in g.chunks_exact(cout) {
                    for (x, &y) in gb.iter_mut().zip(px) {
                        *x += y;
                    }
                }
            });
        }
    }
}

/// Applies a normalized blur to a plain `[h, w, c]` buffer, outside any tape.
pub fn blur_buffer(data: &[f64], h: usize, w: usize, c: usize, kernel: &BlurKernel) -> Vec<f64> {
    let rows = blur_pass(data, h, w, c, &kernel.weights, Axis::Width, false);
    blur_pass(&rows, h, w, c, &kernel.weights, Axis::Height, false)
}

#[derive(Clone, Copy)]
enum Axis {
    Width,
    Height,
}

/// One normalized 1-D blur pass. With `transpose` set it applies the adjoint
/// of the forward pass (scale by the output normalizer, then scatter).
fn blur_pass(src: &[f64], h: usize, w: usize, c: usize, weights: &[f64], axis: Axis, transpose: bool) -> Vec<f64> {
    let r = weights.len() / 2;
    let (len, stride, outer, outer_stride) = match axis {
        Axis::Width => (w, c, h, w * c),
        Axis::Height => (h, w * c, w, c),
    };
    let norms: Vec<f64> = (0..len)
        .map(|i| {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(len - 1);
            (lo..=hi).map(|j| weights[j + r - i]).sum()
        })
        .collect();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for ch in 0..c {
            let base = o * outer_stride + ch;
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(len - 1);
                if transpose {
                    let gi = src[base + i * stride] / norms[i];
                    for j in lo..=hi {
                        out[base + j * stride] += weights[j + r - i] * gi;
                    }
                } else {
                    let acc: f64 = (lo..=hi).map(|j| weights[j + r - i] * src[base + j * stride]).sum();
                    out[base + i * stride] = acc / norms[i];
                }
            }
        }
    }
    out
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates whose difference stencil crossed a relu/clamp kink and
    /// were therefore not compared (always 0 for [`grad_check`]).
    pub skipped: usize,
    pub passed: bool,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest fraction of coordinates [`grad_check_piecewise`] may skip before
/// the check fails regardless of error.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences of step `h`, coordinate by coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_impl(f, x, None, h, tol, false)
}

/// [`grad_check`] for piecewise-smooth `f`: coordinates where `x + h e_i` or
/// `x - h e_i` switches any relu/clamp branch relative to `x` are skipped,
/// since the central difference there straddles a kink. Fails if more than
/// [`MAX_SKIPPED_FRACTION`] of coordinates are skipped.
pub fn grad_check_piecewise<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_impl(f, x, None, h, tol, true)
}

/// Checks the vector-Jacobian product `J(x)^T c` of a tensor-valued `f`
/// against `sum_j (f_j(x + h e_i) - f_j(x - h e_i)) c_j / (2h)`, differencing
/// outputs before contracting so no large sums cancel. Kink-straddling
/// coordinates are skipped as in [`grad_check_piecewise`].
pub fn vjp_check<F>(f: F, x: &Tensor, cotangent: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_impl(f, x, Some(cotangent), h, tol, true)
}

fn check_impl<F>(
    f: F,
    x: &Tensor,
    cotangent: Option<&Tensor>,
    h: f64,
    tol: f64,
    piecewise: bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let loss = match cotangent {
        Some(c) => {
            let cv = tape.constant(c.clone());
            let p = tape.mul(y, cv)?;
            tape.sum(p)
        }
        None => y,
    };
    tape.backward(loss)?;
    let analytic = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
    let pattern = tape.branch_pattern();
    let weights = cotangent.map_or(&[1.0][..], |c| c.data());

    let eval = |point: Tensor| -> Result<(Vec<f64>, bool)> {
        let mut t = Tape::new();
        let v = t.constant(point);
        let out = f(&mut t, v)?;
        let same = !piecewise || t.branch_pattern() == pattern;
        Ok((t.value(out).data().to_vec(), same))
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: x.len(),
        skipped: 0,
        passed: true,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data[i] += h;
        let mut minus = x.clone();
        minus.data[i] -= h;
        // the step actually taken after rounding
        let step = plus.data[i] - minus.data[i];
        let (yp, same_p) = eval(plus)?;
        let (ym, same_m) = eval(minus)?;
        if !(same_p && same_m) {
            report.skipped += 1;
            continue;
        }
        let numeric: f64 = yp
            .iter()
            .zip(&ym)
            .zip(weights)
            .map(|((p, m), c)| (p - m) / step * c)
            .sum();
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed =
        report.max_rel_error < tol && (report.skipped as f64) <= MAX_SKIPPED_FRACTION * report.coordinates as f64;
    Ok(report)
}
