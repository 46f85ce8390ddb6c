use std::collections::HashMap;

use super::{strides, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Operation tag of a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Minimum,
    Maximum,
    AddBias,
    Scale,
    AddScalar,
    Neg,
    Abs,
    Sigmoid,
    Relu,
    Gelu,
    Exp,
    Log,
    Clamp,
    PowF,
    Softmax,
    LayerNorm,
    Concat,
    Slice,
    Reshape,
    Permute,
    GatherRows,
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug)]
enum UnOp {
    Scale(f64),
    AddScalar(f64),
    Neg,
    Abs,
    Sigmoid,
    Relu,
    Gelu,
    Exp,
    Log,
    Clamp(f64, f64),
    PowF(f64),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(BinOp, Var, Var),
    AddBias(Var, Var),
    Unary(UnOp, Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Binary(b, ..) => match b {
                BinOp::Add => OpKind::Add,
                BinOp::Sub => OpKind::Sub,
                BinOp::Mul => OpKind::Mul,
                BinOp::Div => OpKind::Div,
                BinOp::Min => OpKind::Minimum,
                BinOp::Max => OpKind::Maximum,
            },
            Op::AddBias(..) => OpKind::AddBias,
            Op::Unary(u, _) => match u {
                UnOp::Scale(_) => OpKind::Scale,
                UnOp::AddScalar(_) => OpKind::AddScalar,
                UnOp::Neg => OpKind::Neg,
                UnOp::Abs => OpKind::Abs,
                UnOp::Sigmoid => OpKind::Sigmoid,
                UnOp::Relu => OpKind::Relu,
                UnOp::Gelu => OpKind::Gelu,
                UnOp::Exp => OpKind::Exp,
                UnOp::Log => OpKind::Log,
                UnOp::Clamp(..) => OpKind::Clamp,
                UnOp::PowF(_) => OpKind::PowF,
            },
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// A single forward pass recorded for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Tensor<T>>,
    track_params: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_grads: HashMap::new(),
            track_params: true,
            fault: None,
        }
    }

    /// Graph whose parameters are treated as constants.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    /// Test hook: perturbs the backward rule of every node of `kind`.
    #[doc(hidden)]
    pub fn inject_gradient_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    /// Leaf node that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf node excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(T::from_f64(v)))
    }

    /// Leaf for a stored parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, self.track_params);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v`'s value cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&v.0)
    }

    /// Gradients for every parameter leaf that received one, in id order.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, v)| self.leaf_grads.get(&v.0).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ----------------------------------------------------------------- ops

    /// Matrix product over the last two axes.
    ///
    /// Leading (batch) axes must match, or one operand must be rank 2 and is
    /// then shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatMulPlan::new(&sa, &sb)?;
        let mut out = vec![T::zero(); plan.batch * plan.m * plan.n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for bi in 0..plan.batch {
                let ao = if plan.a_shared { 0 } else { bi * plan.m * plan.k };
                let bo = if plan.b_shared { 0 } else { bi * plan.k * plan.n };
                let co = bi * plan.m * plan.n;
                T::gemm(
                    plan.m,
                    plan.k,
                    plan.n,
                    T::one(),
                    &ad[ao..ao + plan.m * plan.k],
                    plan.k as isize,
                    1,
                    &bd[bo..bo + plan.k * plan.n],
                    plan.n as isize,
                    1,
                    T::zero(),
                    &mut out[co..co + plan.m * plan.n],
                    plan.n as isize,
                    1,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(plan.out_shape, out), Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
            BinOp::Min => "minimum",
            BinOp::Max => "maximum",
        };
        let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        };
        let n: usize = shape.iter().product::<usize>().max(1);
        let (da, db) = (ta.data(), tb.data());
        let ia = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
        let ib = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
        if matches!(op, BinOp::Div) && db.iter().any(|&v| v == T::zero()) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let out: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (ia(i), ib(i));
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                    BinOp::Min => x.min(y),
                    BinOp::Max => x.max(y),
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Min, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Max, a, b)
    }

    /// Adds a vector along the last axis of `x` (bias broadcast over rows).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().unwrap_or(&1);
        if tb.rank() != 1 || tb.numel() != d {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let bd = tb.data();
        let out: Vec<T> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias(x, bias), rg))
    }

    fn unary(&mut self, op: UnOp, x: Var) -> Result<Var> {
        let tx = self.value(x);
        match op {
            UnOp::Log if tx.data().iter().any(|&v| !(v > T::zero())) => {
                return Err(Error::Domain {
                    op: "log",
                    msg: "non-positive value; clamp first".into(),
                })
            }
            UnOp::PowF(_) if tx.data().iter().any(|&v| v < T::zero()) => {
                return Err(Error::Domain {
                    op: "powf",
                    msg: "negative base".into(),
                })
            }
            UnOp::Clamp(lo, hi) if lo > hi => {
                return Err(Error::invalid("clamp", format!("lo {lo} > hi {hi}")))
            }
            _ => {}
        }
        let out: Vec<T> = tx.data().iter().map(|&v| unary_fwd(op, v)).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Unary(op, x), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnOp::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnOp::AddScalar(c), x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Neg, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Abs, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Relu, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Gelu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Log, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnOp::Clamp(lo, hi), x)
    }

    pub fn powf(&mut self, x: Var, e: f64) -> Result<Var> {
        self.unary(UnOp::PowF(e), x)
    }

    /// Max-subtracted softmax along `axis`.
    ///
    /// Rejects NaN inputs and slices whose entries are all `-inf` (fully
    /// masked attention rows).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for rank {}", tx.rank()),
            ));
        }
        if tx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = split_axis(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[base + j * inner]);
                }
                if max == T::neg_infinity() {
                    return Err(Error::invalid(
                        "softmax",
                        "every entry of a slice is -inf (all keys masked)",
                    ));
                }
                if max == T::infinity() {
                    return Err(Error::NonFinite { op: "softmax" });
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x, axis), rg))
    }

    /// Layer normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&1);
        for p in [gain, bias] {
            let tp = self.value(p);
            if tp.rank() != 1 || tp.numel() != d {
                return Err(Error::shape("layer_norm", tx.shape(), tp.shape()));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let src = tx.data();
        let rows = src.len() / d;
        let mut out = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let dn = T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec(), axis),
            rg,
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} invalid on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, extent, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * extent * inner + start * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of {} axes", s.len()),
            ));
        }
        let (shape, out) = permute_data(&s, self.value(x).data(), perm);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Permute(x, perm.to_vec()),
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if a0 >= perm.len() || a1 >= perm.len() {
            return Err(Error::invalid("transpose", "axis out of range"));
        }
        perm.swap(a0, a1);
        self.permute(x, &perm)
    }

    /// Selects rows (along axis 0) by index; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || idx.is_empty() {
            return Err(Error::invalid("gather_rows", "needs rank >= 1 and indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::invalid(
                "gather_rows",
                format!("index {bad} out of range for {} rows", s[0]),
            ));
        }
        let row: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows(x, idx.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().fold(T::zero(), |a, &v| a + v) / T::from_f64(t.numel() as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let faulty = self.fault == Some(node.op.kind());
            let mut sink = Sink {
                nodes: &self.nodes,
                grads: &mut grads,
                faulty,
            };
            match &node.op {
                Op::Leaf => {
                    let shape = node.value.shape().to_vec();
                    match self.leaf_grads.get_mut(&i) {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                                *a += *v;
                            }
                        }
                        None => {
                            self.leaf_grads.insert(i, Tensor::from_parts(shape, g));
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (sink.shape(*a), sink.shape(*b));
                    let plan = MatMulPlan::new(sa, sb)?;
                    let (ad, bd) = (sink.data(*a), sink.data(*b));
                    let (m, k, n) = (plan.m, plan.k, plan.n);
                    if sink.wants(*a) {
                        let mut ga = vec![T::zero(); sink.data(*a).len()];
                        for bi in 0..plan.batch {
                            let go = bi * m * n;
                            let bo = if plan.b_shared { 0 } else { bi * k * n };
                            let ao = if plan.a_shared { 0 } else { bi * m * k };
                            // dA = dC · Bᵀ
                            T::gemm(
                                m,
                                n,
                                k,
                                T::one(),
                                &g[go..go + m * n],
                                n as isize,
                                1,
                                &bd[bo..bo + k * n],
                                1,
                                n as isize,
                                T::one(),
                                &mut ga[ao..ao + m * k],
                                k as isize,
                                1,
                            );
                        }
                        sink.add(*a, ga);
                    }
                    if sink.wants(*b) {
                        let mut gb = vec![T::zero(); sink.data(*b).len()];
                        for bi in 0..plan.batch {
                            let go = bi * m * n;
                            let bo = if plan.b_shared { 0 } else { bi * k * n };
                            let ao = if plan.a_shared { 0 } else { bi * m * k };
                            // dB = Aᵀ · dC
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                &ad[ao..ao + m * k],
                                1,
                                k as isize,
                                &g[go..go + m * n],
                                n as isize,
                                1,
                                T::one(),
                                &mut gb[bo..bo + k * n],
                                n as isize,
                                1,
                            );
                        }
                        sink.add(*b, gb);
                    }
                }
                Op::Binary(op, a, b) => {
                    let (da, db) = (sink.data(*a), sink.data(*b));
                    let ia = |j: usize| if da.len() == 1 { da[0] } else { da[j] };
                    let ib = |j: usize| if db.len() == 1 { db[0] } else { db[j] };
                    let mut ga = vec![T::zero(); da.len()];
                    let mut gb = vec![T::zero(); db.len()];
                    let (sa, sb) = (da.len() == 1, db.len() == 1);
                    for (j, &gj) in g.iter().enumerate() {
                        let (x, y) = (ia(j), ib(j));
                        let (dx, dy) = match op {
                            BinOp::Add => (gj, gj),
                            BinOp::Sub => (gj, -gj),
                            BinOp::Mul => (gj * y, gj * x),
                            BinOp::Div => (gj / y, -gj * x / (y * y)),
                            BinOp::Min => {
                                if x <= y {
                                    (gj, T::zero())
                                } else {
                                    (T::zero(), gj)
                                }
                            }
                            BinOp::Max => {
                                if x >= y {
                                    (gj, T::zero())
                                } else {
                                    (T::zero(), gj)
                                }
                            }
                        };
                        ga[if sa { 0 } else { j }] += dx;
                        gb[if sb { 0 } else { j }] += dy;
                    }
                    if a == b {
                        for (x, y) in ga.iter_mut().zip(gb) {
                            *x += y;
                        }
                        sink.add(*a, ga);
                    } else {
                        sink.add(*a, ga);
                        sink.add(*b, gb);
                    }
                }
                Op::AddBias(x, bias) => {
                    let d = sink.data(*bias).len();
                    let mut gbias = vec![T::zero(); d];
                    for (j, &v) in g.iter().enumerate() {
                        gbias[j % d] += v;
                    }
                    sink.add(*bias, gbias);
                    sink.add(*x, g);
                }
                Op::Unary(op, x) => {
                    let xd = sink.data(*x);
                    let yd = node.value.data();
                    let gx: Vec<T> = g
                        .iter()
                        .zip(xd.iter().zip(yd))
                        .map(|(&gj, (&xv, &yv))| gj * unary_grad(*op, xv, yv))
                        .collect();
                    sink.add(*x, gx);
                }
                Op::Softmax(x, axis) => {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut dot = T::zero();
                            for j in 0..len {
                                let p = base + j * inner;
                                dot += g[p] * y[p];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] = y[p] * (g[p] - dot);
                            }
                        }
                    }
                    sink.add(*x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gd = sink.data(*gain);
                    let d = gd.len();
                    let rows = g.len() / d;
                    let dn = T::from_f64(d as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    let mut ggain = vec![T::zero(); d];
                    let mut gbias = vec![T::zero(); d];
                    for r in 0..rows {
                        let off = r * d;
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[off + j] * gd[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[off + j];
                            ggain[j] += g[off + j] * xhat[off + j];
                            gbias[j] += g[off + j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let dh = g[off + j] * gd[j];
                            gx[off + j] = rstd[r] * (dh - mean_dh - xhat[off + j] * mean_dh_h);
                        }
                    }
                    sink.add(*x, gx);
                    sink.add(*gain, ggain);
                    sink.add(*bias, gbias);
                }
                Op::Concat(parts, axis) => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut offset = 0;
                    for &p in parts {
                        let extent = sink.shape(p)[*axis];
                        if sink.wants(p) {
                            let mut gp = Vec::with_capacity(outer * extent * inner);
                            for o in 0..outer {
                                let s = (o * total + offset) * inner;
                                gp.extend_from_slice(&g[s..s + extent * inner]);
                            }
                            sink.add(p, gp);
                        }
                        offset += extent;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let src_shape = sink.shape(*x);
                    let (outer, extent, inner) = split_axis(src_shape, *axis);
                    let len = node.value.shape()[*axis];
                    let mut gx = vec![T::zero(); outer * extent * inner];
                    for o in 0..outer {
                        let dst = o * extent * inner + start * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    sink.add(*x, gx);
                }
                Op::Reshape(x) => sink.add(*x, g),
                Op::Permute(x, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (_, gx) = permute_data(node.value.shape(), &g, &inv);
                    sink.add(*x, gx);
                }
                Op::GatherRows(x, idx) => {
                    let src_len = sink.data(*x).len();
                    let row = node.value.numel() / idx.len();
                    let mut gx = vec![T::zero(); src_len];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..row {
                            gx[i * row + j] += g[k * row + j];
                        }
                    }
                    sink.add(*x, gx);
                }
                Op::Sum(x) => {
                    let n = sink.data(*x).len();
                    sink.add(*x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = sink.data(*x).len();
                    sink.add(*x, vec![g[0] / T::from_f64(n as f64); n]);
                }
            }
        }
        Ok(())
    }
}

struct Sink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    faulty: bool,
}

impl<'a, T: Scalar> Sink<'a, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &'a [T] {
        let nodes: &'a [Node<T>] = self.nodes;
        nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &'a [usize] {
        let nodes: &'a [Node<T>] = self.nodes;
        nodes[v.0].value.shape()
    }

    fn add(&mut self, v: Var, mut contrib: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        if self.faulty {
            let k = T::from_f64(1.05);
            contrib.iter_mut().for_each(|c| *c *= k);
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }
}

struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_shared: bool,
    b_shared: bool,
    out_shape: Vec<usize>,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (a_shared, b_shared, batch_shape) = if ba == bb {
            (false, false, ba)
        } else if ba.is_empty() {
            (true, false, bb)
        } else if bb.is_empty() {
            (false, true, ba)
        } else {
            return Err(Error::shape("matmul", sa, sb));
        };
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut out_shape = batch_shape.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: batch_shape.iter().product(),
            m,
            k,
            n,
            a_shared: a_shared && !batch_shape.is_empty(),
            b_shared: b_shared && !batch_shape.is_empty(),
            out_shape,
        })
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Copy>(shape: &[usize], src: &[T], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    if rank == 0 {
        out.extend_from_slice(src);
        return (out_shape, out);
    }
    // contiguous innermost axis: copy whole rows
    if step[rank - 1] == 1 && rank > 1 {
        let row = out_shape[rank - 1];
        let outer = &out_shape[..rank - 1];
        let mut idx = vec![0usize; rank - 1];
        let mut off = 0usize;
        for _ in 0..src.len() / row.max(1) {
            out.extend_from_slice(&src[off..off + row]);
            for ax in (0..rank - 1).rev() {
                idx[ax] += 1;
                off += step[ax];
                if idx[ax] < outer[ax] {
                    break;
                }
                off -= step[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn unary_fwd<T: Scalar>(op: UnOp, v: T) -> T {
    match op {
        UnOp::Scale(c) => v * T::from_f64(c),
        UnOp::AddScalar(c) => v + T::from_f64(c),
        UnOp::Neg => -v,
        UnOp::Abs => v.abs(),
        UnOp::Sigmoid => sigmoid(v),
        UnOp::Relu => v.max(T::zero()),
        UnOp::Gelu => {
            let c = T::from_f64(GELU_C);
            let a = T::from_f64(GELU_A);
            // 0.5 (1 + tanh u) = sigmoid(2u); exp is cheaper than tanh
            let two_u = T::from_f64(2.0) * c * (v + a * v * v * v);
            v / (T::one() + (-two_u).exp())
        }
        UnOp::Exp => v.exp(),
        UnOp::Log => v.ln(),
        UnOp::Clamp(lo, hi) => v.max(T::from_f64(lo)).min(T::from_f64(hi)),
        UnOp::PowF(e) => v.powf(T::from_f64(e)),
    }
}

fn unary_grad<T: Scalar>(op: UnOp, x: T, y: T) -> T {
    match op {
        UnOp::Scale(c) => T::from_f64(c),
        UnOp::AddScalar(_) => T::one(),
        UnOp::Neg => -T::one(),
        UnOp::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnOp::Sigmoid => y * (T::one() - y),
        UnOp::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnOp::Gelu => {
            let c = T::from_f64(GELU_C);
            let a = T::from_f64(GELU_A);
            let two = T::from_f64(2.0);
            let s = T::one() / (T::one() + (-two * c * (x + a * x * x * x)).exp());
            let du = c * (T::one() + T::from_f64(3.0) * a * x * x);
            s + two * x * s * (T::one() - s) * du
        }
        UnOp::Exp => y,
        UnOp::Log => T::one() / x,
        UnOp::Clamp(lo, hi) => {
            if x > T::from_f64(lo) && x < T::from_f64(hi) {
                T::one()
            } else {
                T::zero()
            }
        }
        UnOp::PowF(e) => {
            if e == 0.0 {
                T::zero()
            } else {
                T::from_f64(e) * x.powf(T::from_f64(e - 1.0))
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let a = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let i = g.constant(Tensor::eye(3));
        let av = g.constant(a.clone());
        let y = g.matmul(i, av).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn small_matmul_by_hand() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn batched_matmul_with_shared_rhs() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = g.input(t(&[2, 1], &[10., 1.]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 1]);
        assert_eq!(g.value(y).data(), &[12.0, 34.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[10.0, 1.0, 10.0, 1.0]);
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g.value(y).data()[1], 0.0, epsilon = 1e-6);
        let x = g.constant(Tensor::new(&[2], vec![f32::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax(x, 0), Err(Error::NonFinite { .. })));
        let x = g.constant(Tensor::new(&[2], vec![f32::NEG_INFINITY; 2]).unwrap());
        assert!(g.softmax(x, 0).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[0., 1., 2., 3., 4., 5.]));
        let y = g.softmax(x, 0).unwrap();
        for c in 0..3 {
            let s = g.value(y).at(&[0, c]) + g.value(y).at(&[1, c]);
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[3], vec![0.0, -3.0, 3.0]).unwrap());
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
        let c = g.clamp(x, -1.0, 1.0).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn layer_norm_of_constant_is_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[3.0; 4]));
        let gain = g.constant(t(&[4], &[2., 2., 2., 2.]));
        let bias = g.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn layer_norm_pre_affine_has_unit_variance() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 5], &[1., -2., 0.5, 4., 3.]));
        let one = g.constant(Tensor::full(&[5], 1.0));
        let zero = g.constant(Tensor::zeros(&[5]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        let d = g.value(y).data();
        let mean: f64 = d.iter().sum::<f64>() / 5.0;
        let var: f64 = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn concat_slice_round_trip_and_grad() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.input(t(&[2, 1], &[5., 6.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 5., 3., 4., 6.]);
        let a2 = g.slice(c, 1, 0, 2).unwrap();
        let b2 = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_rejects_inconsistent_extents() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.concat(&[a, b], 1).is_err());
    }

    #[test]
    fn transpose_twice_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>()));
        let y = g.transpose(x, 0, 2).unwrap();
        assert_eq!(g.shape(y), &[4, 3, 2]);
        assert_eq!(g.value(y).at(&[3, 1, 0]), g.value(x).at(&[0, 1, 3]));
        let z = g.transpose(y, 0, 2).unwrap();
        assert_eq!(g.value(z), g.value(x));
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[4], &[0.3, -1.2, 2.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        for &v in g.grad(x).unwrap().data() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1., 2.]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(2.0));
        let y = g.scale(x, 3.0).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn shared_subexpression_matches_unrolled_tree() {
        // DAG: s = x*y; out = s*s + s. Unrolled tree computes s three times.
        let (xv, yv) = (1.5, -0.7);
        let mut dag = Graph::<f64>::new();
        let x = dag.input(Tensor::scalar(xv));
        let y = dag.input(Tensor::scalar(yv));
        let s = dag.mul(x, y).unwrap();
        let sq = dag.mul(s, s).unwrap();
        let out = dag.add(sq, s).unwrap();
        dag.backward(out).unwrap();

        let mut tree = Graph::<f64>::new();
        let x2 = tree.input(Tensor::scalar(xv));
        let y2 = tree.input(Tensor::scalar(yv));
        let s1 = tree.mul(x2, y2).unwrap();
        let s2 = tree.mul(x2, y2).unwrap();
        let s3 = tree.mul(x2, y2).unwrap();
        let sq = tree.mul(s1, s2).unwrap();
        let out2 = tree.add(sq, s3).unwrap();
        tree.backward(out2).unwrap();

        assert_eq!(dag.value(out), tree.value(out2));
        assert_abs_diff_eq!(
            dag.grad(x).unwrap().item(),
            tree.grad(x2).unwrap().item(),
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            dag.grad(y).unwrap().item(),
            tree.grad(y2).unwrap().item(),
            epsilon = 1e-14
        );
        // d/dx (s^2 + s) = (2s + 1) y
        let sv = xv * yv;
        assert_abs_diff_eq!(dag.grad(x).unwrap().item(), (2.0 * sv + 1.0) * yv, epsilon = 1e-14);
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = g.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[5., 6., 1., 2., 5., 6.]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
        assert!(g.gather_rows(x, &[3]).is_err());
    }

    #[test]
    fn inference_graph_tracks_no_param_grads() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", super::super::ParamGroup::Rest, Tensor::scalar(2.0));
        let mut g = Graph::<f64>::inference();
        let w = g.param(&store, id);
        assert!(!g.requires_grad(w));
        let mut g = Graph::<f64>::new();
        let w = g.param(&store, id);
        let w2 = g.param(&store, id);
        assert_eq!(w, w2);
        let y = g.mul(w, w2).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.param_grads()[0].1.item(), 4.0);
    }
}
