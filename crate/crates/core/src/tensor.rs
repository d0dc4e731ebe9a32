//! Dense rank-4 tensors in (N, C, H, W) order and the raw kernels behind
//! the tape operations.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Extent of a rank-4 tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    fn from_dims(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Shape both operands broadcast to, where every dimension pair must be
    /// equal or contain a 1.
    pub fn broadcast(&self, other: &Shape) -> Result<Shape> {
        let (a, b) = (self.dims(), other.dims());
        let mut out = [0; 4];
        for i in 0..4 {
            out[i] = match (a[i], b[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return config_err(format!("cannot broadcast {self} with {other}")),
            };
        }
        Ok(Shape::from_dims(out))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Spatial padding mode of a convolution. Stride is always 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; output shrinks by `k - 1` in each spatial dimension.
    Valid,
    /// Zero padding of `k / 2`; output keeps the input spatial size.
    #[default]
    SameZero,
}

impl Padding {
    pub fn pad(self, k: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::SameZero => k / 2,
        }
    }

    /// Output spatial extent for an input extent and odd kernel size.
    pub fn output_extent(self, input: usize, k: usize) -> Option<usize> {
        match self {
            Padding::Valid => input.checked_sub(k - 1).filter(|&e| e > 0),
            Padding::SameZero => Some(input),
        }
    }
}

/// Dense double-precision tensor of shape (N, C, H, W), row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return config_err(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.shape.index(n, c, h, w);
        &mut self.data[i]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Usage(format!("tensor of shape {} is not a scalar", self.shape))),
        }
    }

    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }

    /// Elementwise `self + other` with broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_zip(self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_zip(self, other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_zip(self, other, |a, b| a * b)
    }

    /// Copy of channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if start + len > s.c {
            return config_err(format!("channel slice {start}..{} out of range for {s}", start + len));
        }
        let plane = s.h * s.w;
        let out_shape = Shape::new(s.n, len, s.h, s.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor::from_vec(out_shape, data)
    }

    /// Spatial window of size `h x w` starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if top + h > s.h || left + w > s.w {
            return config_err(format!("crop {h}x{w} at ({top},{left}) exceeds {s}"));
        }
        Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, i, j| {
            self.at(n, c, top + i, left + j)
        }))
    }
}

/// Channel concatenation, `x` first.
pub fn concat_channels(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (a, b) = (x.shape(), y.shape());
    if a.n != b.n || a.h != b.h || a.w != b.w {
        return config_err(format!("concat_channels: {a} and {b} disagree on N, H or W"));
    }
    let plane = a.h * a.w;
    let out = Shape::new(a.n, a.c + b.c, a.h, a.w);
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..a.n {
        data.extend_from_slice(&x.data[n * a.c * plane..(n + 1) * a.c * plane]);
        data.extend_from_slice(&y.data[n * b.c * plane..(n + 1) * b.c * plane]);
    }
    Tensor::from_vec(out, data)
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let out = a.shape.broadcast(&b.shape)?;
    if a.shape == b.shape {
        return Ok(Tensor {
            shape: out,
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        });
    }
    let ia = BroadcastIndex::new(a.shape);
    let ib = BroadcastIndex::new(b.shape);
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..out.n {
        for c in 0..out.c {
            for h in 0..out.h {
                let (ra, rb) = (ia.get(n, c, h, 0), ib.get(n, c, h, 0));
                for w in 0..out.w {
                    data.push(f(a.data[ra + w * ia.sw], b.data[rb + w * ib.sw]));
                }
            }
        }
    }
    Ok(Tensor { shape: out, data })
}

/// Maps an index in a broadcast output shape back into a source tensor.
#[derive(Clone, Copy)]
pub(crate) struct BroadcastIndex {
    sn: usize,
    sc: usize,
    sh: usize,
    sw: usize,
}

impl BroadcastIndex {
    pub(crate) fn new(shape: Shape) -> Self {
        // Broadcast dimensions get stride 0.
        let stride = |d: usize, s: usize| if d == 1 { 0 } else { s };
        Self {
            sn: stride(shape.n, shape.c * shape.h * shape.w),
            sc: stride(shape.c, shape.h * shape.w),
            sh: stride(shape.h, shape.w),
            sw: stride(shape.w, 1),
        }
    }

    #[inline]
    pub(crate) fn get(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        n * self.sn + c * self.sc + h * self.sh + w * self.sw
    }
}

/// Sum `grad` (shaped like a broadcast output) back down to `shape`.
pub(crate) fn reduce_to(grad: &Tensor, shape: Shape) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let idx = BroadcastIndex::new(shape);
    let g = grad.shape;
    let mut out = Tensor::zeros(shape);
    let mut k = 0;
    for n in 0..g.n {
        for c in 0..g.c {
            for h in 0..g.h {
                for w in 0..g.w {
                    out.data[idx.get(n, c, h, w)] += grad.data[k];
                    k += 1;
                }
            }
        }
    }
    out
}

fn check_conv(x: Shape, k: Shape, bias: Option<&Tensor>, padding: Padding) -> Result<Shape> {
    if k.h != k.w || k.h % 2 == 0 {
        return config_err(format!("conv2d kernel must be square with odd size, got {k}"));
    }
    if k.c != x.c {
        return config_err(format!(
            "conv2d kernel expects {} input channels, input {x} has {}",
            k.c, x.c
        ));
    }
    if let Some(b) = bias {
        if b.len() != k.n {
            return config_err(format!(
                "conv2d bias has {} entries for {} output channels",
                b.len(),
                k.n
            ));
        }
    }
    let (Some(h), Some(w)) = (padding.output_extent(x.h, k.h), padding.output_extent(x.w, k.w)) else {
        return config_err(format!("kernel {k} does not fit input {x} with {padding:?} padding"));
    };
    Ok(Shape::new(x.n, k.n, h, w))
}

/// 2-d cross-correlation with stride 1. `kernel` is (C_out, C_in, k, k);
/// `bias`, when present, holds one value per output channel.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, padding: Padding) -> Result<Tensor> {
    let xs = x.shape;
    let ks = kernel.shape;
    let out_shape = check_conv(xs, ks, bias, padding)?;
    let k = ks.h;
    if k == 1 {
        return Ok(pointwise_conv(x, kernel, bias, out_shape));
    }
    let pad = padding.pad(k) as isize;
    let mut out = Tensor::zeros(out_shape);
    let (oh, ow) = (out_shape.h, out_shape.w);
    for n in 0..xs.n {
        for co in 0..ks.n {
            let obase = out_shape.index(n, co, 0, 0);
            let orow = &mut out.data[obase..obase + oh * ow];
            if let Some(b) = bias {
                orow.iter_mut().for_each(|v| *v = b.data[co]);
            }
            for ci in 0..xs.c {
                let xbase = xs.index(n, ci, 0, 0);
                let xplane = &x.data[xbase..xbase + xs.h * xs.w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kernel.data[ks.index(co, ci, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        // Output rows/cols whose source pixel lies inside the input.
                        let (i0, i1) = valid_range(dy, oh, xs.h);
                        let (j0, j1) = valid_range(dx, ow, xs.w);
                        for i in i0..i1 {
                            let si = (i as isize + dy) as usize;
                            let src = &xplane[si * xs.w..(si + 1) * xs.w];
                            let dst = &mut orow[i * ow..(i + 1) * ow];
                            for j in j0..j1 {
                                dst[j] += wv * src[(j as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Range of output indices `i` with `0 <= i + offset < input`.
#[inline]
fn valid_range(offset: isize, output: usize, input: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (input as isize - offset).clamp(0, output as isize) as usize;
    (lo.min(hi), hi)
}

/// Gradients of `conv2d` with respect to its input, kernel and bias.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    padding: Padding,
    want_x: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let xs = x.shape;
    let ks = kernel.shape;
    let gs = grad_out.shape;
    let k = ks.h;
    let pad = padding.pad(k) as isize;
    let (oh, ow) = (gs.h, gs.w);
    let mut gx = want_x.then(|| Tensor::zeros(xs));
    let mut gk = Tensor::zeros(ks);
    let mut gb = Tensor::zeros(Shape::new(1, ks.n, 1, 1));
    if k == 1 {
        pointwise_conv_backward(x, kernel, grad_out, gx.as_mut(), &mut gk, &mut gb);
        return (gx, gk, gb);
    }
    for n in 0..xs.n {
        for co in 0..ks.n {
            let gbase = gs.index(n, co, 0, 0);
            let grow = &grad_out.data[gbase..gbase + oh * ow];
            gb.data[co] += grow.iter().sum::<f64>();
            for ci in 0..xs.c {
                let xbase = xs.index(n, ci, 0, 0);
                for ky in 0..k {
                    for kx in 0..k {
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let (i0, i1) = valid_range(dy, oh, xs.h);
                        let (j0, j1) = valid_range(dx, ow, xs.w);
                        let widx = ks.index(co, ci, ky, kx);
                        let wv = kernel.data[widx];
                        let mut acc = 0.0;
                        for i in i0..i1 {
                            let si = (i as isize + dy) as usize;
                            let srow = xbase + si * xs.w;
                            for j in j0..j1 {
                                let sj = (j as isize + dx) as usize;
                                let g = grow[i * ow + j];
                                acc += g * x.data[srow + sj];
                                if let Some(gx) = gx.as_mut() {
                                    gx.data[srow + sj] += g * wv;
                                }
                            }
                        }
                        gk.data[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

/// 1x1 convolution: a per-position channel mix.
fn pointwise_conv(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, out_shape: Shape) -> Tensor {
    let xs = x.shape;
    let hw = xs.h * xs.w;
    let cout = kernel.shape.n;
    let mut out = Tensor::zeros(out_shape);
    for n in 0..xs.n {
        let xn = &x.data[n * xs.c * hw..(n + 1) * xs.c * hw];
        for co in 0..cout {
            let o = &mut out.data[(n * cout + co) * hw..(n * cout + co + 1) * hw];
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = b.data[co]);
            }
            let w = &kernel.data[co * xs.c..(co + 1) * xs.c];
            for (ci, &wv) in w.iter().enumerate() {
                for (ov, xv) in o.iter_mut().zip(&xn[ci * hw..(ci + 1) * hw]) {
                    *ov += wv * xv;
                }
            }
        }
    }
    out
}

fn pointwise_conv_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    mut gx: Option<&mut Tensor>,
    gk: &mut Tensor,
    gb: &mut Tensor,
) {
    let xs = x.shape;
    let hw = xs.h * xs.w;
    let cout = kernel.shape.n;
    for n in 0..xs.n {
        let xn = &x.data[n * xs.c * hw..(n + 1) * xs.c * hw];
        for co in 0..cout {
            let g = &grad_out.data[(n * cout + co) * hw..(n * cout + co + 1) * hw];
            gb.data[co] += g.iter().sum::<f64>();
            for ci in 0..xs.c {
                let xp = &xn[ci * hw..(ci + 1) * hw];
                gk.data[co * xs.c + ci] += g.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                if let Some(gx) = gx.as_deref_mut() {
                    let wv = kernel.data[co * xs.c + ci];
                    let base = (n * xs.c + ci) * hw;
                    for (d, gv) in gx.data[base..base + hw].iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                }
            }
        }
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    #[default]
    Relu,
    Silu,
    Elu,
    Softplus,
    Sigmoid,
    /// Swish with beta = 1; identical to SiLU.
    Swish,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 6] = [
        ActivationKind::Relu,
        ActivationKind::Silu,
        ActivationKind::Elu,
        ActivationKind::Softplus,
        ActivationKind::Sigmoid,
        ActivationKind::Swish,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Silu => "silu",
            ActivationKind::Elu => "elu",
            ActivationKind::Softplus => "softplus",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Swish => "swish",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Silu | ActivationKind::Swish => x * sigmoid(x),
            ActivationKind::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            ActivationKind::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            ActivationKind::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative; ReLU uses 0 at the origin.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Silu | ActivationKind::Swish => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            ActivationKind::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            ActivationKind::Softplus => sigmoid(x),
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise activation.
pub fn activation(x: &Tensor, kind: ActivationKind) -> Tensor {
    x.map(|v| kind.apply(v))
}
