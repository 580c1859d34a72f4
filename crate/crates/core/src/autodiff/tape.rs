//! Reverse-mode tape over dense tensors.
//!
//! Ops are recorded eagerly as they are applied; [`Tape::backward`] walks the
//! record in reverse. Model-specific fused ops (attention aggregation,
//! InfoNCE, in-batch softmax) plug in through [`CustomOp`].

use std::collections::BTreeMap;
use std::rc::Rc;

use super::tensor::{matmul, matmul_nt, matmul_tn, ParameterStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// A fused operation with a hand-written backward pass.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input, given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>>;

    /// Smallest distance of any internal pre-activation to a non-differentiable point.
    fn kink_distance(&self) -> Option<f64> {
        None
    }
}

enum Op {
    Param(String),
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    EmbedMean { table: Var, bags: Rc<Vec<Vec<usize>>> },
    Gather { src: Var, idx: Rc<Vec<usize>> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Elu(_) => "elu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sum(_) => "sum",
            Op::EmbedMean { .. } => "embed_mean",
            Op::Gather { .. } => "gather_rows",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(value, Op::Param(name.into()))
    }

    /// A non-trainable leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let out = matmul(ta, tb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape("matmul_nt", format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape())));
        }
        let out = matmul_nt(ta, tb);
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    /// Adds the 1×c row `b` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = Tensor::zeros(&[ta.rows(), ta.cols()]);
        for i in 0..ta.rows() {
            for ((o, x), y) in out.row_mut(i).iter_mut().zip(ta.row(i)).zip(tb.data()) {
                *o = x + y;
            }
        }
        Ok(self.push(out, Op::AddBias(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::shape("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| c * v);
        self.push(out, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(elu);
        self.push(out, Op::Elu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| leaky_relu(v, slope));
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Row b of the output is the mean of `table` rows listed in `bags[b]`
    /// (zero for an empty bag).
    pub fn embed_mean(&mut self, table: Var, bags: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let t = self.value(table);
        let d = t.cols();
        let mut out = Tensor::zeros(&[bags.len(), d]);
        for (b, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let inv = 1.0 / bag.len() as f64;
            let row = out.row_mut(b);
            for &tok in bag {
                if tok >= t.rows() {
                    return Err(Error::shape("embed_mean", format!("index {tok} >= {}", t.rows())));
                }
                for (o, v) in row.iter_mut().zip(t.row(tok)) {
                    *o += inv * v;
                }
            }
        }
        Ok(self.push(out, Op::EmbedMean { table, bags }))
    }

    pub fn gather_rows(&mut self, src: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(src);
        let mut out = Tensor::zeros(&[idx.len(), t.cols()]);
        for (k, &i) in idx.iter().enumerate() {
            if i >= t.rows() {
                return Err(Error::shape("gather_rows", format!("index {i} >= {}", t.rows())));
            }
            out.row_mut(k).copy_from_slice(t.row(i));
        }
        Ok(self.push(out, Op::Gather { src, idx }))
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(value, Op::Custom { inputs, op })
    }

    /// Name of the first op whose output is non-finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes.iter().find(|n| !n.value.is_finite()).map(|n| n.op.name())
    }

    /// Smallest |pre-activation| over every recorded kinked activation.
    pub fn min_kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            let input = match &node.op {
                Op::Elu(a) | Op::LeakyRelu(a, _) => Some(*a),
                Op::Custom { op, .. } => {
                    if let Some(d) = op.kink_distance() {
                        best = best.min(d);
                    }
                    None
                }
                _ => None,
            };
            if let Some(a) = input {
                for v in self.value(a).data() {
                    best = best.min(v.abs());
                }
            }
        }
        best
    }

    /// Gradients of scalar `loss` w.r.t. every node, indexed by node.
    fn backward_all(&self, loss: Var) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut seed = Tensor::zeros(self.value(loss).shape());
        seed.data_mut().fill(1.0);
        grads[loss.0] = Some(seed);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param(_) | Op::Constant => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, matmul_nt(&g, tb));
                    acc(&mut grads, *b, matmul_tn(ta, &g));
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, matmul(&g, tb));
                    acc(&mut grads, *b, matmul_tn(&g, ta));
                }
                Op::AddBias(a, b) => {
                    let mut gb = Tensor::zeros(self.value(*b).shape());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    let ga = reshape_like(&g, self.value(*a));
                    let gb = reshape_like(&g, self.value(*b));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = zip_like(ta, &g, tb, |g, y| g * y);
                    let gb = zip_like(tb, &g, ta, |g, x| g * x);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|v| c * v)),
                Op::Tanh(a) => {
                    let ga = zip_like(self.value(*a), &g, &node.value, |g, y| g * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let ga = zip_like(x, &g, x, |g, x| if x > 0.0 { g } else { g * x.exp() });
                    acc(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let ga = zip_like(x, &g, x, |g, x| if x > 0.0 { g } else { g * slope });
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let mut ga = Tensor::zeros(self.value(*a).shape());
                    ga.data_mut().fill(g.item());
                    acc(&mut grads, *a, ga);
                }
                Op::EmbedMean { table, bags } => {
                    let mut gt = Tensor::zeros(self.value(*table).shape());
                    for (b, bag) in bags.iter().enumerate() {
                        if bag.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / bag.len() as f64;
                        for &tok in bag {
                            for (o, v) in gt.row_mut(tok).iter_mut().zip(g.row(b)) {
                                *o += inv * v;
                            }
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Gather { src, idx } => {
                    let mut gs = Tensor::zeros(self.value(*src).shape());
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, v) in gs.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                    for (v, gi) in inputs.iter().zip(op.backward(&ins, &node.value, &g)) {
                        if let Some(gi) = gi {
                            acc(&mut grads, *v, gi);
                        }
                    }
                }
            }
        }
        grads
    }

    /// Gradients of a scalar loss w.r.t. every `param` leaf, keyed by name.
    /// Params the loss does not depend on get no entry.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be scalar"));
        }
        let grads = self.backward_all(loss);
        let mut out = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&self.nodes[i].op, g) {
                match out.get_mut(name) {
                    Some(existing) => Tensor::add_assign(existing, &g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn reshape_like(g: &Tensor, like: &Tensor) -> Tensor {
    Tensor::new(like.shape().to_vec(), g.data().to_vec()).expect("length checked at forward time")
}

fn zip_like(like: &Tensor, g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&g, &o)| f(g, o)).collect();
    Tensor::new(like.shape().to_vec(), data).expect("length checked at forward time")
}

/// Handles for the parameters of a [`ParameterStore`] registered on a tape.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        ParamVars { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }
}

/// Registers every slot of `params` on a fresh tape.
pub fn register(tape: &mut Tape, params: &ParameterStore) -> ParamVars {
    let vars = params.iter().map(|(name, t)| (name.clone(), tape.param(name.clone(), t.clone()))).collect();
    ParamVars { vars }
}

/// Runs `build` on a fresh tape holding `params`, then back-propagates.
/// The returned gradient store has exactly the slots of `params`; slots the
/// loss does not reach are zero.
pub fn forward_backward<F>(params: &ParameterStore, build: F) -> Result<(f64, ParameterStore)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = register(&mut tape, params);
    let loss = build(&mut tape, &vars)?;
    if let Some(op) = tape.first_non_finite() {
        return Err(Error::NonFinite { op: op.to_string() });
    }
    let mut by_name = tape.backward(loss)?;
    let mut grads = ParameterStore::new();
    for (name, t) in params.iter() {
        let g = by_name.remove(name).unwrap_or_else(|| Tensor::zeros(t.shape()));
        grads.insert(name.clone(), g)?;
    }
    Ok((tape.value(loss).item(), grads))
}
