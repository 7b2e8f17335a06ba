//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive pushes a
//! node holding its output value and whatever it needs for the backward
//! rule; nodes are appended in evaluation order, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use flowlab::autodiff::Tape;
//! use flowlab::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![3.0]));
//! let y = tape.mul(x, x).unwrap();
//! let root = tape.sum(y).unwrap();
//! let grads = tape.backward(root).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{broadcast_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-10;

pub fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

pub fn gelu_tanh_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

type Derivative = Rc<dyn Fn(f64, f64) -> f64>;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    GeluTanh(Var),
    Sqrt(Var),
    Abs(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Broadcast(Var),
    Reshape(Var),
    Gather(Var, Rc<Vec<usize>>),
    /// Pointwise map with a caller-supplied derivative `d(x, y)`.
    Pointwise(Var, Derivative),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::GeluTanh(..) => "gelu_tanh",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather",
            Op::Pointwise(..) => "pointwise",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    inference: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .finish()
    }
}

/// Gradients of a scalar root with respect to every grad-requiring leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_leaf.get(&v)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters bind as constants; nothing is differentiable
    /// through [`Tape::param`].
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::default()
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Concat(xs, _) => xs.iter().any(|x| self.needs(*x)),
            Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::GeluTanh(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::ClampMin(a, _)
            | Op::Softmax(a)
            | Op::LayerNorm(a, _)
            | Op::Slice(a, _, _)
            | Op::Broadcast(a)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::Pointwise(a, _) => self.needs(*a),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter from `store` as a grad-requiring leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.inference {
            return self.constant(store.value(id).clone());
        }
        let v = self.leaf(store.value(id).clone());
        self.params.push((v, id));
        v
    }

    pub fn param_bindings(&self) -> &[(Var, ParamId)] {
        &self.params
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var> {
        let out = f(self.value(a), self.value(b))?;
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::add, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::sub, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::mul, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::div, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::matmul, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.value(a).is_empty() {
            return Err(Error::Empty("mean"));
        }
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() == 0 {
            return Err(Error::Contract("sum_last on a scalar".into()));
        }
        let out = self.value(a).sum_last();
        self.push(out, Op::SumLast(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn gelu_tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_tanh);
        self.push(out, Op::GeluTanh(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `max(x, floor)`; gradient flows only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(floor));
        self.push(out, Op::ClampMin(a, floor))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() == 0 {
            return Err(Error::Contract("softmax on a scalar".into()));
        }
        let out = self.value(a).softmax_last();
        self.push(out, Op::Softmax(a))
    }

    /// Normalizes the last axis to zero mean and unit (biased) variance. No affine.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() == 0 {
            return Err(Error::Contract("layer_norm on a scalar".into()));
        }
        let d = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d.max(1)) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * r;
            }
            inv_std.push(r);
        }
        let out = Tensor::from_vec(x.shape().to_vec(), out)?;
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat(&values, axis)?;
        self.push(out, Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice(axis, start, end)?;
        self.push(out, Op::Slice(a, axis, start))
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).broadcast_to(shape)?;
        self.push(out, Op::Broadcast(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    /// `out.flat[i] = a.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Contract(format!("gather index {bad} out of range {}", src.len())));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(shape.to_vec(), data)?;
        self.push(out, Op::Gather(a, indices))
    }

    /// Pointwise `f` with derivative `df(x, f(x))` supplied by the caller.
    pub fn pointwise(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(out, Op::Pointwise(a, Rc::new(df)))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).shape().is_empty() {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                out.by_leaf.insert(Var(i), g);
                continue;
            }
            for (input, contrib) in self.local_grads(node, &g)? {
                if !self.needs(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(out)
    }

    /// Backward into `store`: zeroes every parameter gradient, then fills
    /// each with `∂root/∂param` summed over its bindings on this tape.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(root)?;
        store.zero_grad();
        store.accumulate(self, &grads)
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.reduce_to(val(*a).shape())?), (*b, g.reduce_to(val(*b).shape())?)],
            Op::Sub(a, b) => vec![
                (*a, g.reduce_to(val(*a).shape())?),
                (*b, g.scale(-1.0).reduce_to(val(*b).shape())?),
            ],
            Op::Mul(a, b) => {
                let ga = g.mul(val(*b))?.reduce_to(val(*a).shape())?;
                let gb = g.mul(val(*a))?.reduce_to(val(*b).shape())?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                let ga = g.div(val(*b))?.reduce_to(val(*a).shape())?;
                let gb = g.mul(y)?.div(val(*b))?.scale(-1.0).reduce_to(val(*b).shape())?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::MatMul(a, b) => {
                let ga = if self.needs(*a) {
                    g.matmul(&val(*b).transpose()?)?
                } else {
                    Tensor::zeros(val(*a).shape())
                };
                let gb = if self.needs(*b) {
                    val(*a).transpose()?.matmul(g)?
                } else {
                    Tensor::zeros(val(*b).shape())
                };
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
            }
            Op::SumLast(a) => {
                let shape = val(*a).shape();
                let d = *shape.last().unwrap();
                let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect();
                vec![(*a, Tensor::from_vec(shape.to_vec(), data)?)]
            }
            Op::Exp(a) => vec![(*a, g.mul(y)?)],
            Op::Log(a) => vec![(*a, g.div(val(*a))?)],
            Op::Tanh(a) => vec![(*a, g.zip_same(y, "tanh", |gi, yi| gi * (1.0 - yi * yi))?)],
            Op::GeluTanh(a) => vec![(*a, g.zip_same(val(*a), "gelu_tanh", |gi, xi| gi * gelu_tanh_grad(xi))?)],
            Op::Sqrt(a) => vec![(*a, g.zip_same(y, "sqrt", |gi, yi| gi / (2.0 * yi))?)],
            Op::Abs(a) => vec![(*a, g.zip_same(val(*a), "abs", |gi, xi| gi * sign(xi))?)],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::ClampMin(a, floor) => vec![(
                *a,
                g.zip_same(val(*a), "clamp_min", |gi, xi| if xi > *floor { gi } else { 0.0 })?,
            )],
            Op::Softmax(a) => {
                let d = *y.shape().last().unwrap();
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out.chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((oi, yi), gi) in o.iter_mut().zip(yr).zip(gr) {
                        *oi = yi * (gi - dot);
                    }
                }
                vec![(*a, Tensor::from_vec(y.shape().to_vec(), out)?)]
            }
            Op::LayerNorm(a, inv_std) => {
                let d = *y.shape().last().unwrap();
                let mut out = vec![0.0; y.len()];
                for (((o, yr), gr), r) in out
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(g.data().chunks(d))
                    .zip(inv_std)
                {
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((oi, yi), gi) in o.iter_mut().zip(yr).zip(gr) {
                        *oi = r * (gi - mean_g - yi * mean_gy);
                    }
                }
                vec![(*a, Tensor::from_vec(y.shape().to_vec(), out)?)]
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let n = val(*p).shape()[*axis];
                    res.push((*p, g.slice(*axis, start, start + n)?));
                    start += n;
                }
                res
            }
            Op::Slice(a, axis, start) => {
                let src_shape = val(*a).shape();
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[*axis + 1..].iter().product();
                let n_src = src_shape[*axis];
                let n_out = g.shape()[*axis];
                let mut out = Tensor::zeros(src_shape);
                let od = out.data_mut();
                for o in 0..outer {
                    let dst = o * n_src * inner + start * inner;
                    let src = o * n_out * inner;
                    od[dst..dst + n_out * inner].copy_from_slice(&g.data()[src..src + n_out * inner]);
                }
                vec![(*a, out)]
            }
            Op::Broadcast(a) => vec![(*a, g.reduce_to(val(*a).shape())?)],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Gather(a, idx) => {
                let mut out = Tensor::zeros(val(*a).shape());
                let od = out.data_mut();
                for (&i, &gi) in idx.iter().zip(g.data()) {
                    od[i] += gi;
                }
                vec![(*a, out)]
            }
            Op::Pointwise(a, df) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(gi, (xi, yi))| gi * df(*xi, *yi))
                    .collect();
                vec![(*a, Tensor::from_vec(x.shape().to_vec(), data)?)]
            }
        })
    }

    /// Result shape of broadcasting `a` against `b`, without recording anything.
    pub fn broadcast_shape(&self, a: Var, b: Var) -> Result<Vec<usize>> {
        broadcast_shape(self.shape(a), self.shape(b), "broadcast")
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]));
        let y = tape.square(x).unwrap();
        let r = tape.sum(y).unwrap();
        let g = tape.backward(r).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_root_has_no_gradients() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let r = tape.mean(c).unwrap();
        assert!(tape.backward(r).unwrap().is_empty());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        assert!(matches!(tape.log(x), Err(Error::NonFinite(op)) if op == "log"));
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx (x*x + x) = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, -1.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let r = tape.sum(s).unwrap();
        let g = tape.backward(r).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 4, vec![1., 2., 3., 10., -5., 0., 5., 7.]).unwrap());
        let y = tape.layer_norm(x).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            let mu = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }
}
