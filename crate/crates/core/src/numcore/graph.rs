//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Parameters enter through [`Graph::param`], which looks them up in a borrowed
//! [`ParamStore`]; frozen parameters enter as constants. [`Graph::backward`]
//! walks the tape in reverse and returns one gradient per trainable
//! parameter that was registered.
//!
//! ```
//! use cxrl::numcore::{gradients_of, ParamStore, Precision, Tensor};
//!
//! let mut store = ParamStore::new(Precision::F64);
//! store.insert("w", Tensor::scalar(3.0), false).unwrap();
//! let grads = gradients_of(&store, |g| {
//!     let w = g.param("w")?;
//!     g.square(w)
//! })
//! .unwrap();
//! assert_eq!(grads.get("w").unwrap().item(), Some(6.0));
//! ```

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::params::{ParamError, ParamStore};
use super::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range {bound} in `{op}`")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    SumLast(Var),
    SoftmaxLast(Var),
    Reshape(Var),
    Transpose(Var),
    Gather { table: Var, ids: Vec<usize> },
    PrependRows { prefix: Var, rest: Var },
    L2NormalizeLast(Var),
    BceWithLogits { logits: Var, targets: Vec<f64> },
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<(), GraphError> {
        for (k, g) in &other.map {
            match self.map.get_mut(k) {
                Some(mine) => {
                    if mine.shape() != g.shape() {
                        return Err(GraphError::Shape {
                            op: "accumulate",
                            lhs: mine.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(k.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
    track: bool,
}

impl<'s> Graph<'s> {
    /// A graph that records gradients for the trainable entries of `store`.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track: true,
        }
    }

    /// A graph that treats every parameter as a constant.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    /// A graph with no parameter store, for constant-only computations.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track: false,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var, GraphError> {
        if !value.all_finite() {
            return Err(GraphError::NonFinite(name));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, GraphError> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Looks up a registered parameter. Repeated lookups return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var, GraphError> {
        if let Some(v) = self.param_vars.get(name) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        let p = store
            .get(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        let needs_grad = self.track && !p.frozen;
        let v = self.push(p.value.clone(), Op::Leaf, needs_grad, "param")?;
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> GraphError {
        GraphError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `a[..., k] · b[k, n]`, contracting the last axis of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.is_empty() || bsh.len() != 2 || *ash.last().unwrap() != bsh[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = self.value(a).len() / k;
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), ng, "matmul")
    }

    /// `a[m, k] · b[n, k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[1] {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), ng, "matmul_nt")
    }

    /// Per-batch product of `a[B, m, k]` with `b[B, k, n]`, or with
    /// `b[B, n, k]ᵀ` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, GraphError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = ash.len() == 3
            && bsh.len() == 3
            && ash[0] == bsh[0]
            && if trans_b { ash[2] == bsh[2] } else { ash[2] == bsh[1] };
        if !ok {
            return Err(self.shape_err("batch_matmul", a, b));
        }
        let (batch, m, k) = (ash[0], ash[1], ash[2]);
        let n = if trans_b { bsh[1] } else { bsh[2] };
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let asl = &ad[bi * m * k..(bi + 1) * m * k];
                let bsl = &bd[bi * k * n..(bi + 1) * k * n];
                let osl = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    matmul_nt_acc(asl, bsl, osl, m, k, n);
                } else {
                    matmul_acc(asl, bsl, osl, m, k, n);
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            ng,
            "batch_matmul",
        )
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, GraphError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng, "mul")
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias add).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
            return Err(self.shape_err("add_broadcast", a, b));
        }
        let bd = self.value(b).data();
        let w = bd.len();
        let data = self
            .value(a)
            .data()
            .chunks(w)
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::from_parts(ash.to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::AddBroadcast(a, b), ng, "add_broadcast")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GraphError> {
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng, "scale")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, GraphError> {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(t, Op::Silu(a), ng, "silu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GraphError> {
        let t = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng, "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GraphError> {
        let t = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng, "sigmoid")
    }

    pub fn square(&mut self, a: Var) -> Result<Var, GraphError> {
        let t = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(t, Op::Square(a), ng, "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GraphError> {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GraphError> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, GraphError> {
        let sh = self.shape(a).to_vec();
        let w = *sh.last().ok_or_else(|| self.shape_err("sum_last", a, a))?;
        let data: Vec<f64> = self.value(a).data().chunks(w).map(|r| r.iter().sum()).collect();
        let t = Tensor::from_parts(sh[..sh.len() - 1].to_vec(), data);
        let ng = self.ng(a);
        self.push(t, Op::SumLast(a), ng, "sum_last")
    }

    /// Softmax over the last axis. Entries whose `keep` flag is false get
    /// probability exactly zero; every row must keep at least one entry.
    pub fn softmax_last(&mut self, a: Var, keep: Option<Vec<bool>>) -> Result<Var, GraphError> {
        let sh = self.shape(a).to_vec();
        let w = *sh.last().ok_or_else(|| self.shape_err("softmax_last", a, a))?;
        let x = self.value(a).data();
        if let Some(k) = &keep {
            if k.len() != x.len() {
                return Err(GraphError::Shape {
                    op: "softmax_last",
                    lhs: sh.clone(),
                    rhs: vec![k.len()],
                });
            }
        }
        let mut out = vec![0.0; x.len()];
        for (r, (xr, or)) in x.chunks(w).zip(out.chunks_mut(w)).enumerate() {
            let kept = |j: usize| keep.as_ref().is_none_or(|k| k[r * w + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in xr.iter().enumerate() {
                if kept(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(GraphError::NonFinite("softmax_last"));
            }
            let mut z = 0.0;
            for (j, (&v, o)) in xr.iter().zip(or.iter_mut()).enumerate() {
                if kept(j) {
                    *o = (v - mx).exp();
                    z += *o;
                }
            }
            for o in or.iter_mut() {
                *o /= z;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_parts(sh, out), Op::SoftmaxLast(a), ng, "softmax_last")
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var, GraphError> {
        let t = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng, "reshape")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GraphError> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 {
            return Err(self.shape_err("transpose", a, a));
        }
        let (r, c) = (sh[0], sh[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), ng, "transpose")
    }

    /// Looks up rows of `table[V, d]`; the result has shape `out_shape`,
    /// whose element count must be `ids.len() * d`.
    pub fn gather(&mut self, table: Var, ids: &[usize], out_shape: impl Into<Vec<usize>>) -> Result<Var, GraphError> {
        let sh = self.shape(table).to_vec();
        if sh.len() != 2 {
            return Err(self.shape_err("gather", table, table));
        }
        let (v, d) = (sh[0], sh[1]);
        let out_shape = out_shape.into();
        if out_shape.iter().product::<usize>() != ids.len() * d {
            return Err(GraphError::Shape {
                op: "gather",
                lhs: sh,
                rhs: out_shape,
            });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(GraphError::Index {
                    op: "gather",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
            "gather",
        )
    }

    /// `[prefix; rest_b]` for every batch entry: `prefix[N, d]`,
    /// `rest[B, M, d]` → `[B, N + M, d]`.
    pub fn prepend_rows(&mut self, prefix: Var, rest: Var) -> Result<Var, GraphError> {
        let (psh, rsh) = (self.shape(prefix).to_vec(), self.shape(rest).to_vec());
        if psh.len() != 2 || rsh.len() != 3 || psh[1] != rsh[2] {
            return Err(self.shape_err("prepend_rows", prefix, rest));
        }
        let (n, d, b, m) = (psh[0], psh[1], rsh[0], rsh[1]);
        let (pd, rd) = (self.value(prefix).data(), self.value(rest).data());
        let mut out = Vec::with_capacity(b * (n + m) * d);
        for bi in 0..b {
            out.extend_from_slice(pd);
            out.extend_from_slice(&rd[bi * m * d..(bi + 1) * m * d]);
        }
        let ng = self.ng(prefix) || self.ng(rest);
        self.push(
            Tensor::from_parts(vec![b, n + m, d], out),
            Op::PrependRows { prefix, rest },
            ng,
            "prepend_rows",
        )
    }

    /// Scales every last-axis row to unit Euclidean norm.
    pub fn l2_normalize_last(&mut self, a: Var) -> Result<Var, GraphError> {
        let sh = self.shape(a).to_vec();
        let w = *sh.last().ok_or_else(|| self.shape_err("l2_normalize_last", a, a))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(w) {
            let n = (dot(row, row) + NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_parts(sh, out), Op::L2NormalizeLast(a), ng, "l2_normalize_last")
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, GraphError> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(GraphError::Shape {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let total: f64 = z.iter().zip(targets).map(|(&z, &t)| softplus(z) - t * z).sum();
        let loss = total / z.len() as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
            "bce_with_logits",
        )
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var, GraphError> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 || sh[0] != targets.len() {
            return Err(GraphError::Shape {
                op: "cross_entropy_rows",
                lhs: sh,
                rhs: vec![targets.len()],
            });
        }
        let c = sh[1];
        let x = self.value(logits).data();
        let mut total = 0.0;
        for (row, &t) in x.chunks(c).zip(targets) {
            if t >= c {
                return Err(GraphError::Index {
                    op: "cross_entropy_rows",
                    index: t,
                    bound: c,
                });
            }
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / targets.len() as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
            ng,
            "cross_entropy_rows",
        )
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients, GraphError> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(GraphError::NonScalarOutput(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out_val.shape().to_vec(), 1.0));

        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (k, n) = (bv.shape()[0], bv.shape()[1]);
                    let m = av.len() / k;
                    if self.ng(*a) {
                        let mut ga = vec![0.0; m * k];
                        matmul_nt_acc(gy.data(), bv.data(), &mut ga, m, n, k);
                        acc(&mut grads, *a, av.shape(), ga);
                    }
                    if self.ng(*b) {
                        let mut gb = vec![0.0; k * n];
                        matmul_tn_acc(av.data(), gy.data(), &mut gb, m, k, n);
                        acc(&mut grads, *b, bv.shape(), gb);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                    if self.ng(*a) {
                        let mut ga = vec![0.0; m * k];
                        matmul_acc(gy.data(), bv.data(), &mut ga, m, n, k);
                        acc(&mut grads, *a, av.shape(), ga);
                    }
                    if self.ng(*b) {
                        let mut gb = vec![0.0; n * k];
                        matmul_tn_acc(gy.data(), av.data(), &mut gb, m, n, k);
                        acc(&mut grads, *b, bv.shape(), gb);
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = y.shape()[2];
                    let mut ga = self.ng(*a).then(|| vec![0.0; av.len()]);
                    let mut gb = self.ng(*b).then(|| vec![0.0; bv.len()]);
                    for bi in 0..batch {
                        let gys = &gy.data()[bi * m * n..(bi + 1) * m * n];
                        let asl = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let bsl = &bv.data()[bi * k * n..(bi + 1) * k * n];
                        if let Some(ga) = ga.as_mut() {
                            let gas = &mut ga[bi * m * k..(bi + 1) * m * k];
                            if *trans_b {
                                // y = a·bᵀ, b is [n,k]
                                matmul_acc(gys, bsl, gas, m, n, k);
                            } else {
                                matmul_nt_acc(gys, bsl, gas, m, n, k);
                            }
                        }
                        if let Some(gb) = gb.as_mut() {
                            let gbs = &mut gb[bi * k * n..(bi + 1) * k * n];
                            if *trans_b {
                                matmul_tn_acc(gys, asl, gbs, m, n, k);
                            } else {
                                matmul_tn_acc(asl, gys, gbs, m, k, n);
                            }
                        }
                    }
                    if let Some(ga) = ga {
                        acc(&mut grads, *a, av.shape(), ga);
                    }
                    if let Some(gb) = gb {
                        acc(&mut grads, *b, bv.shape(), gb);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.ng(v) {
                            acc(&mut grads, v, gy.shape(), gy.data().to_vec());
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, gy.shape(), gy.data().to_vec());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, gy.shape(), gy.data().iter().map(|g| -g).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let g = gy.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                        acc(&mut grads, *a, gy.shape(), g);
                    }
                    if self.ng(*b) {
                        let g = gy.data().iter().zip(av.data()).map(|(g, a)| g * a).collect();
                        acc(&mut grads, *b, gy.shape(), g);
                    }
                }
                Op::AddBroadcast(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, gy.shape(), gy.data().to_vec());
                    }
                    if self.ng(*b) {
                        let bv = self.value(*b);
                        let mut g = vec![0.0; bv.len()];
                        for row in gy.data().chunks(bv.len()) {
                            for (o, r) in g.iter_mut().zip(row) {
                                *o += r;
                            }
                        }
                        acc(&mut grads, *b, bv.shape(), g);
                    }
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, *a, gy.shape(), gy.data().iter().map(|g| g * c).collect());
                }
                Op::Silu(a) => {
                    let x = self.value(*a).data();
                    let g = gy
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * (s * (1.0 + x * (1.0 - s)))
                        })
                        .collect();
                    acc(&mut grads, *a, gy.shape(), g);
                }
                Op::Tanh(a) => {
                    let g = gy.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                    acc(&mut grads, *a, gy.shape(), g);
                }
                Op::Sigmoid(a) => {
                    let g = gy.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                    acc(&mut grads, *a, gy.shape(), g);
                }
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    let g = gy.data().iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                    acc(&mut grads, *a, gy.shape(), g);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, av.shape(), vec![gy.data()[0]; av.len()]);
                }
                Op::SumLast(a) => {
                    let av = self.value(*a);
                    let w = *av.shape().last().unwrap();
                    let g = gy.data().iter().flat_map(|&g| std::iter::repeat_n(g, w)).collect();
                    acc(&mut grads, *a, av.shape(), g);
                }
                Op::SoftmaxLast(x) => {
                    let w = *y.shape().last().unwrap();
                    let mut g = vec![0.0; y.len()];
                    for ((yr, gr), out) in y.data().chunks(w).zip(gy.data().chunks(w)).zip(g.chunks_mut(w)) {
                        let s = dot(yr, gr);
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - s);
                        }
                    }
                    acc(&mut grads, *x, y.shape(), g);
                }
                Op::Reshape(a) => {
                    let sh = self.shape(*a).to_vec();
                    acc(&mut grads, *a, &sh, gy.data().to_vec());
                }
                Op::Transpose(a) => {
                    let (r, c) = (y.shape()[0], y.shape()[1]);
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            g[j * r + i] = gy.data()[i * c + j];
                        }
                    }
                    let sh = self.shape(*a).to_vec();
                    acc(&mut grads, *a, &sh, g);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    let mut g = vec![0.0; tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in g[id * d..(id + 1) * d].iter_mut().zip(&gy.data()[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *table, tv.shape(), g);
                }
                Op::PrependRows { prefix, rest } => {
                    let (pv, rv) = (self.value(*prefix), self.value(*rest));
                    let (n, d) = (pv.shape()[0], pv.shape()[1]);
                    let (b, m) = (rv.shape()[0], rv.shape()[1]);
                    let row = (n + m) * d;
                    if self.ng(*prefix) {
                        let mut g = vec![0.0; n * d];
                        for bi in 0..b {
                            for (o, v) in g.iter_mut().zip(&gy.data()[bi * row..bi * row + n * d]) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *prefix, pv.shape(), g);
                    }
                    if self.ng(*rest) {
                        let mut g = Vec::with_capacity(rv.len());
                        for bi in 0..b {
                            g.extend_from_slice(&gy.data()[bi * row + n * d..(bi + 1) * row]);
                        }
                        acc(&mut grads, *rest, rv.shape(), g);
                    }
                }
                Op::L2NormalizeLast(a) => {
                    let x = self.value(*a).data();
                    let w = *y.shape().last().unwrap();
                    let mut g = vec![0.0; y.len()];
                    for (((yr, gr), xr), out) in y
                        .data()
                        .chunks(w)
                        .zip(gy.data().chunks(w))
                        .zip(x.chunks(w))
                        .zip(g.chunks_mut(w))
                    {
                        let norm = (dot(xr, xr) + NORM_EPS).sqrt();
                        let s = dot(yr, gr);
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * s) / norm;
                        }
                    }
                    acc(&mut grads, *a, y.shape(), g);
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.value(*logits);
                    let scale = gy.data()[0] / z.len() as f64;
                    let g = z.data().iter().zip(targets).map(|(&z, &t)| scale * (sigmoid(z) - t)).collect();
                    acc(&mut grads, *logits, z.shape(), g);
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let lv = self.value(*logits);
                    let c = lv.shape()[1];
                    let scale = gy.data()[0] / targets.len() as f64;
                    let mut g = vec![0.0; lv.len()];
                    for ((row, out), &t) in lv.data().chunks(c).zip(g.chunks_mut(c)).zip(targets) {
                        let lse = log_sum_exp(row);
                        for (o, &v) in out.iter_mut().zip(row) {
                            *o = scale * (v - lse).exp();
                        }
                        out[t] -= scale;
                    }
                    acc(&mut grads, *logits, lv.shape(), g);
                }
            }
        }

        let mut out = Gradients::new();
        for (name, v) in &self.param_vars {
            if !self.nodes[v.0].needs_grad {
                continue;
            }
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.shape(*v).to_vec()));
            out.insert(name.clone(), g);
        }
        if !out.all_finite() {
            return Err(GraphError::NonFinite("backward"));
        }
        Ok(out)
    }
}

const NORM_EPS: f64 = 1e-12;

fn acc(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    if v.0 >= grads.len() {
        return;
    }
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), g)),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Builds a graph over `store` with `f`, then differentiates its scalar
/// output. Every trainable parameter of the store gets an entry (zero when
/// the output does not depend on it); frozen parameters get none.
pub fn gradients_of<F>(store: &ParamStore, f: F) -> Result<Gradients, GraphError>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var, GraphError>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    let mut grads = g.backward(out)?;
    for (name, p) in store.iter() {
        if !p.frozen && grads.get(name).is_none() {
            grads.insert(name, Tensor::zeros(p.value.shape().to_vec()));
        }
    }
    Ok(grads)
}
