//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node. Because inputs are
//! always recorded before their consumers, node order is a topological
//! order and the backward sweep simply walks the node list in reverse.

use crate::error::{Error, Result};
use crate::norm::{normalize_backward, normalize_raw, NormCache, NormKind, NormSpec};
use crate::tensor::{self, reduce_to, ActivationKind, Padding, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Activation {
        x: Var,
        kind: ActivationKind,
    },
    Norm {
        x: Var,
        kind: NormKind,
        gamma: Option<Var>,
        beta: Option<Var>,
        cache: NormCache,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: one optional gradient per tape slot.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient with respect to `v`; exact zeros when `v` does not reach
    /// the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    /// True when some path connects `v` to the loss.
    pub fn is_connected(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
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

    /// Trainable or differentiated input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let value = tensor::conv2d(self.value(x), self.value(kernel), bias.map(|b| self.value(b)), padding)?;
        let rg = self.rg(x) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Var {
        let value = tensor::activation(self.value(x), kind);
        let rg = self.rg(x);
        self.push(value, Op::Activation { x, kind }, rg)
    }

    /// Normalization with optional per-channel affine parameters, each of
    /// shape (1, C, 1, 1).
    pub fn normalize(&mut self, x: Var, spec: NormSpec, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let c = self.shape(x).c;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != Shape::new(1, c, 1, 1) {
                return Err(Error::Config(format!(
                    "affine parameter shape {} does not match (1, {c}, 1, 1)",
                    self.shape(p)
                )));
            }
        }
        let cache = normalize_raw(self.value(x), spec)?;
        let mut value = cache.xhat.clone();
        if let Some(g) = gamma {
            value = value.mul(self.value(g))?;
        }
        if let Some(b) = beta {
            value = value.add(self.value(b))?;
        }
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Norm {
                x,
                kind: spec.kind,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Broadcasting subtraction.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// `a + factor * b` for same-shaped operands.
    pub fn axpy(&mut self, a: Var, factor: f64, b: Var) -> Result<Var> {
        let sb = self.scale(b, factor);
        self.add(a, sb)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference between two same-shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Config(format!(
                "mse operands differ: {} vs {}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let value = self.value(x).crop(top, left, h, w)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Crop { x, top, left }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_channels(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceChannels { x, start }, rg))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shapes: Vec<Shape> = self.nodes.iter().map(|n| n.value.shape()).collect();
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(shapes[loss.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        // Constants never expose a gradient.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
            } => {
                let (gx, gk, gb) =
                    tensor::conv2d_backward(self.value(*x), self.value(*kernel), g, *padding, self.rg(*x));
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *kernel, gk);
                if let Some(b) = bias {
                    let gb = gb.reshape(self.shape(*b))?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Concat { a, b } => {
                let ca = self.shape(*a).c;
                let cb = self.shape(*b).c;
                self.accumulate(grads, *a, g.slice_channels(0, ca)?);
                self.accumulate(grads, *b, g.slice_channels(ca, cb)?);
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                gx.data_mut()
                    .iter_mut()
                    .zip(xv.data())
                    .for_each(|(gi, &xi)| *gi *= kind.derivative(xi));
                self.accumulate(grads, *x, gx);
            }
            Op::Norm {
                x,
                kind,
                gamma,
                beta,
                cache,
            } => {
                let c = cache.xhat.shape().c;
                let per_channel = Shape::new(1, c, 1, 1);
                if let Some(b) = beta {
                    self.accumulate(grads, *b, reduce_to(g, per_channel));
                }
                let grad_xhat = match gamma {
                    Some(gm) => {
                        self.accumulate(grads, *gm, reduce_to(&g.mul(&cache.xhat)?, per_channel));
                        g.mul(self.value(*gm))?
                    }
                    None => g.clone(),
                };
                if self.rg(*x) {
                    self.accumulate(grads, *x, normalize_backward(cache, *kind, &grad_xhat));
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                self.accumulate(grads, *b, reduce_to(g, self.shape(*b)));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                self.accumulate(grads, *b, reduce_to(&g.scale(-1.0), self.shape(*b)));
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let ga = g.mul(self.value(*b))?;
                    self.accumulate(grads, *a, reduce_to(&ga, self.shape(*a)));
                }
                if self.rg(*b) {
                    let gb = g.mul(self.value(*a))?;
                    self.accumulate(grads, *b, reduce_to(&gb, self.shape(*b)));
                }
            }
            Op::Scale { x, factor } => self.accumulate(grads, *x, g.scale(*factor)),
            Op::Sum { x } => {
                let gv = g.item()?;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.reshape(self.shape(*x))?),
            Op::Crop { x, top, left } => {
                let s = g.shape();
                let mut gx = Tensor::zeros(self.shape(*x));
                for n in 0..s.n {
                    for c in 0..s.c {
                        for h in 0..s.h {
                            for w in 0..s.w {
                                *gx.at_mut(n, c, top + h, left + w) = g.at(n, c, h, w);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceChannels { x, start } => {
                let s = g.shape();
                let mut gx = Tensor::zeros(self.shape(*x));
                for n in 0..s.n {
                    for c in 0..s.c {
                        for h in 0..s.h {
                            for w in 0..s.w {
                                *gx.at_mut(n, start + c, h, w) = g.at(n, c, h, w);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}
