//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it is evaluated. Values are computed
//! eagerly; [`Graph::backward`] walks the tape once in reverse and leaves a
//! gradient on every node that depends on a `requires_grad` leaf.

pub(crate) mod kernels;

pub mod adam;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::modulation::kernel::{self as mk, MapDims};
use crate::tensor::{Scalar, Tensor};

pub use kernels::softmax;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

enum Op<T> {
    Leaf,
    Conv2d { input: usize, weight: usize, bias: usize, k: usize },
    Relu(usize),
    Add(usize, usize),
    Concat(usize, usize),
    Upsample { input: usize, factor: usize },
    AvgPool { input: usize, factor: usize },
    Softmax(usize),
    L1 { a: usize, b: usize },
    Sum(usize),
    DotConst { input: usize, coeffs: Vec<T> },
    Unfold { input: usize, size: usize },
    Logits { stack: usize, target: usize },
    Aggregate { stack: usize, weights: usize },
    Modulate { source: usize, target: usize, size: usize, weights: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Concat(..) => "concat",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::AvgPool { .. } => "avg_pool_down",
            Op::Softmax(_) => "softmax",
            Op::L1 { .. } => "l1_loss",
            Op::Sum(_) => "sum",
            Op::DotConst { .. } => "dot_const",
            Op::Unfold { .. } => "unfold",
            Op::Logits { .. } => "neighborhood_logits",
            Op::Aggregate { .. } => "neighborhood_aggregate",
            Op::Modulate { .. } => "modulate",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => vec![input, weight, bias],
            Op::Relu(x) | Op::Softmax(x) | Op::Sum(x) => vec![x],
            Op::Add(a, b) | Op::Concat(a, b) | Op::L1 { a, b } => vec![a, b],
            Op::Upsample { input, .. }
            | Op::AvgPool { input, .. }
            | Op::DotConst { input, .. }
            | Op::Unfold { input, .. } => vec![input],
            Op::Logits { stack, target } => vec![stack, target],
            Op::Aggregate { stack, weights } => vec![stack, weights],
            Op::Modulate { source, target, .. } => vec![source, target],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation for one forward/backward pass.
pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::State("variable is detached from this graph".into()));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("variable from another graph")].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[self.idx(v).expect("variable from another graph")].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v).expect("variable from another graph")].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(op.name(), "non-finite output"));
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(Var { graph: self.id, index: self.nodes.len() - 1 })
    }

    fn dims3(&self, v: usize) -> Result<(usize, usize, usize)> {
        self.nodes[v].value.dims3()
    }

    /// Same-padded cross-correlation. `input` is `C_in×H×W`, `weight` is
    /// `C_out×C_in×k×k`, `bias` has `C_out` entries.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, wt, b) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let (c_in, h, w) = self.dims3(x)?;
        let (c_out, k) = match *self.nodes[wt].value.shape() {
            [co, ci, k1, k2] if ci == c_in && k1 == k2 => (co, k1),
            ref s => {
                return Err(Error::Config(format!(
                    "conv weight {s:?} does not match {c_in} input channels"
                )))
            }
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv kernel size {k} must be odd")));
        }
        if self.nodes[b].value.shape() != [c_out] {
            return Err(Error::Config(format!("conv bias must have {c_out} entries")));
        }
        let d = kernels::ConvDims { c_in, c_out, h, w, k };
        let out = kernels::conv2d_forward(self.nodes[x].value.data(), self.nodes[wt].value.data(), self.nodes[b].value.data(), d);
        self.push(Op::Conv2d { input: x, weight: wt, bias: b, k }, Tensor::new(&[c_out, h, w], out)?)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let v = &self.nodes[x].value;
        let out = Tensor::new(v.shape(), kernels::relu_forward(v.data()))?;
        self.push(Op::Relu(x), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::arg(format!("add: shapes {:?} and {:?} differ", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(Op::Add(a, b), out)
    }

    /// Channel concatenation of two `C×H×W` maps with equal `H×W`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (ca, ha, wa) = self.dims3(a)?;
        let (cb, hb, wb) = self.dims3(b)?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::arg(format!("concat: spatial sizes {ha}×{wa} and {hb}×{wb} differ")));
        }
        let mut data = self.nodes[a].value.data().to_vec();
        data.extend_from_slice(self.nodes[b].value.data());
        self.push(Op::Concat(a, b), Tensor::new(&[ca + cb, ha, wa], data)?)
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let x = self.idx(x)?;
        if factor < 1 {
            return Err(Error::arg("upsampling factor must be at least 1"));
        }
        let (c, h, w) = self.dims3(x)?;
        let out = kernels::upsample_forward(self.nodes[x].value.data(), c, h, w, factor);
        self.push(Op::Upsample { input: x, factor }, Tensor::new(&[c, h * factor, w * factor], out)?)
    }

    pub fn avg_pool_down(&mut self, x: Var, factor: usize) -> Result<Var> {
        let x = self.idx(x)?;
        let (c, h, w) = self.dims3(x)?;
        if factor < 1 || h % factor != 0 || w % factor != 0 {
            return Err(Error::arg(format!("{h}×{w} is not divisible by pooling factor {factor}")));
        }
        let out = kernels::avg_pool_forward(self.nodes[x].value.data(), c, h, w, factor);
        self.push(Op::AvgPool { input: x, factor }, Tensor::new(&[c, h / factor, w / factor], out)?)
    }

    /// Softmax along the leading axis, independently for every trailing
    /// position. On a 1-D tensor this is the ordinary vector softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let v = &self.nodes[x].value;
        if v.data().iter().any(|e| e.is_nan()) {
            return Err(Error::numeric("softmax", "NaN logit"));
        }
        let l = *v.shape().first().ok_or_else(|| Error::arg("softmax of a scalar"))?;
        if l == 0 {
            return Err(Error::arg("softmax over an empty axis"));
        }
        let out = Tensor::new(v.shape(), kernels::softmax_leading_forward(v.data(), l))?;
        self.push(Op::Softmax(x), out)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::arg(format!("l1_loss: shapes {:?} and {:?} differ", va.shape(), vb.shape())));
        }
        let out = Tensor::scalar(kernels::l1_forward(va.data(), vb.data()));
        self.push(Op::L1 { a, b }, out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let s = self.nodes[x].value.data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// `Σ x ⊙ coeffs` for a constant coefficient tensor of the same shape.
    pub fn dot_const(&mut self, x: Var, coeffs: &Tensor<T>) -> Result<Var> {
        let x = self.idx(x)?;
        let v = &self.nodes[x].value;
        if v.shape() != coeffs.shape() {
            return Err(Error::arg("dot_const: shape mismatch"));
        }
        let s = v.data().iter().zip(coeffs.data()).map(|(&a, &b)| a * b).sum();
        self.push(Op::DotConst { input: x, coeffs: coeffs.data().to_vec() }, Tensor::scalar(s))
    }

    /// Replicate-padded `size×size` neighborhoods: `C×H×W -> C×L×H×W`.
    pub fn unfold(&mut self, x: Var, size: usize) -> Result<Var> {
        let x = self.idx(x)?;
        check_window(size)?;
        let (c, h, w) = self.dims3(x)?;
        let out = mk::unfold_forward(self.nodes[x].value.data(), MapDims { c, h, w }, size);
        self.push(Op::Unfold { input: x, size }, Tensor::new(&[c, size * size, h, w], out)?)
    }

    /// Per-pixel correlation of every neighbor in a `C×L×H×W` stack with a
    /// `C×H×W` target map: the result is `L×H×W`.
    pub fn neighborhood_logits(&mut self, stack: Var, target: Var) -> Result<Var> {
        let (s, t) = (self.idx(stack)?, self.idx(target)?);
        let (c, l, h, w) = stack_dims(&self.nodes[s].value)?;
        if self.dims3(t)? != (c, h, w) {
            return Err(Error::arg(format!(
                "target map {:?} does not match stack {:?}",
                self.nodes[t].value.shape(),
                self.nodes[s].value.shape()
            )));
        }
        let out = mk::logits_forward(self.nodes[s].value.data(), self.nodes[t].value.data(), c, l, h * w);
        self.push(Op::Logits { stack: s, target: t }, Tensor::new(&[l, h, w], out)?)
    }

    /// Weighted combination of stack columns: `C×L×H×W, L×H×W -> C×H×W`.
    pub fn neighborhood_aggregate(&mut self, stack: Var, weights: Var) -> Result<Var> {
        let (s, wv) = (self.idx(stack)?, self.idx(weights)?);
        let (c, l, h, w) = stack_dims(&self.nodes[s].value)?;
        if self.nodes[wv].value.shape() != [l, h, w] {
            return Err(Error::arg("weights do not match the neighborhood stack"));
        }
        let out = mk::aggregate_forward(self.nodes[s].value.data(), self.nodes[wv].value.data(), c, l, h * w);
        self.push(Op::Aggregate { stack: s, weights: wv }, Tensor::new(&[c, h, w], out)?)
    }

    /// Fused cross-domain adaptive filter: each pixel of `source` becomes the
    /// softmax-weighted combination of its `size×size` neighbors, weighted by
    /// their correlation with the same pixel of `target`.
    pub fn modulate(&mut self, source: Var, target: Var, size: usize) -> Result<Var> {
        let (s, t) = (self.idx(source)?, self.idx(target)?);
        check_window(size)?;
        let (c, h, w) = self.dims3(s)?;
        if self.dims3(t)? != (c, h, w) {
            return Err(Error::arg(format!(
                "modulation inputs differ in shape: {:?} vs {:?}",
                self.nodes[s].value.shape(),
                self.nodes[t].value.shape()
            )));
        }
        let (out, weights) =
            mk::modulate_forward(self.nodes[s].value.data(), self.nodes[t].value.data(), MapDims { c, h, w }, size);
        self.push(Op::Modulate { source: s, target: t, size, weights }, Tensor::new(&[c, h, w], out)?)
    }

    /// Per-pixel weights of a fused [`Graph::modulate`] node as an `L×H×W` tensor.
    pub fn modulation_weights(&self, v: Var) -> Result<Tensor<T>> {
        let i = self.idx(v)?;
        match &self.nodes[i].op {
            Op::Modulate { size, weights, .. } => {
                let (_, h, w) = self.dims3(i)?;
                let l = size * size;
                let lhw = mk::to_chw(weights, l, h * w);
                Tensor::new(&[l, h, w], lhw)
            }
            other => Err(Error::arg(format!("{} node carries no filter weights", other.name()))),
        }
    }

    /// Reverse pass from a scalar loss. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.idx(loss)?;
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        if !self.nodes[root].requires_grad {
            return Err(Error::State("loss is detached: no differentiable input reaches it".into()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(&shape, g)?);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].requires_grad;
        let val = |j: usize| nodes[j].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d { input, weight, bias, k } => {
                let (c_in, h, w) = self.dims3(input)?;
                let c_out = nodes[weight].value.shape()[0];
                let d = kernels::ConvDims { c_in, c_out, h, w, k };
                let cg = kernels::conv2d_backward(val(input), val(weight), g, d, [needs(input), needs(weight), needs(bias)]);
                accumulate(grads, input, cg.input);
                accumulate(grads, weight, cg.weight);
                accumulate(grads, bias, cg.bias);
            }
            &Op::Relu(x) => accumulate(grads, x, Some(kernels::relu_backward(val(x), g))),
            &Op::Add(a, b) => {
                if needs(a) {
                    accumulate(grads, a, Some(g.to_vec()));
                }
                if needs(b) {
                    accumulate(grads, b, Some(g.to_vec()));
                }
            }
            &Op::Concat(a, b) => {
                let split = nodes[a].value.numel();
                if needs(a) {
                    accumulate(grads, a, Some(g[..split].to_vec()));
                }
                if needs(b) {
                    accumulate(grads, b, Some(g[split..].to_vec()));
                }
            }
            &Op::Upsample { input, factor } => {
                let (c, h, w) = self.dims3(input)?;
                accumulate(grads, input, Some(kernels::upsample_backward(g, c, h, w, factor)));
            }
            &Op::AvgPool { input, factor } => {
                let (c, h, w) = self.dims3(input)?;
                accumulate(grads, input, Some(kernels::avg_pool_backward(g, c, h, w, factor)));
            }
            &Op::Softmax(x) => {
                let l = nodes[x].value.shape()[0];
                accumulate(grads, x, Some(kernels::softmax_leading_backward(val(i), g, l)));
            }
            &Op::L1 { a, b } => {
                let da = kernels::l1_backward(val(a), val(b), g[0]);
                if needs(b) {
                    accumulate(grads, b, Some(da.iter().map(|&v| -v).collect()));
                }
                if needs(a) {
                    accumulate(grads, a, Some(da));
                }
            }
            &Op::Sum(x) => accumulate(grads, x, Some(vec![g[0]; nodes[x].value.numel()])),
            Op::DotConst { input, coeffs } => {
                accumulate(grads, *input, Some(coeffs.iter().map(|&c| c * g[0]).collect()));
            }
            &Op::Unfold { input, size } => {
                let (c, h, w) = self.dims3(input)?;
                accumulate(grads, input, Some(mk::unfold_backward(g, MapDims { c, h, w }, size)));
            }
            &Op::Logits { stack, target } => {
                let (c, l, h, w) = stack_dims(&nodes[stack].value)?;
                let (ds, dt) = mk::logits_backward(val(stack), val(target), g, c, l, h * w);
                if needs(stack) {
                    accumulate(grads, stack, Some(ds));
                }
                if needs(target) {
                    accumulate(grads, target, Some(dt));
                }
            }
            &Op::Aggregate { stack, weights } => {
                let (c, l, h, w) = stack_dims(&nodes[stack].value)?;
                let (ds, dw) = mk::aggregate_backward(val(stack), val(weights), g, c, l, h * w);
                if needs(stack) {
                    accumulate(grads, stack, Some(ds));
                }
                if needs(weights) {
                    accumulate(grads, weights, Some(dw));
                }
            }
            Op::Modulate { source, target, size, weights } => {
                let (source, target) = (*source, *target);
                let (c, h, w) = self.dims3(source)?;
                let (ds, dt) = mk::modulate_backward(
                    val(source),
                    val(target),
                    weights,
                    g,
                    MapDims { c, h, w },
                    *size,
                    needs(target),
                );
                if needs(source) {
                    accumulate(grads, source, Some(ds));
                }
                accumulate(grads, target, dt);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match &mut grads[idx] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, &v)| *e += v),
        slot => *slot = Some(g),
    }
}

fn check_window(size: usize) -> Result<()> {
    if size.is_multiple_of(2) {
        return Err(Error::arg(format!("neighborhood size {size} must be odd")));
    }
    Ok(())
}

fn stack_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [c, l, h, w] => Ok((c, l, h, w)),
        ref s => Err(Error::arg(format!("expected a C×L×H×W neighborhood stack, got {s:?}"))),
    }
}
