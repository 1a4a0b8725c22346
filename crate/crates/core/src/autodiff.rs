//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! topologically sorted by construction and [`Graph::backward`] is a single
//! reverse sweep. Parameters live in a [`ParamSet`] and are referenced by the
//! graph without copying; gradients come back as a [`Gradients`] map keyed by
//! [`ParamId`].

use crate::error::{Error, Result};
use rand::Rng;

/// Dense row-major array of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform initialization in `[-range, range]`.
    pub fn uniform<R: Rng>(shape: Vec<usize>, range: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-range..=range)).collect();
        Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.values.len());
        self.grad = Some(grad);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique within the set.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// `θ ← θ + scale · g` for every parameter with a gradient.
    pub fn apply(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.iter() {
            for (p, d) in self.tensors[id.0].values.iter_mut().zip(g) {
                *p += scale * d;
            }
        }
    }

    pub fn fill(&mut self, value: f64) {
        for t in &mut self.tensors {
            t.values.iter_mut().for_each(|v| *v = value);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Copies values of every parameter from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter layouts differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape != src.shape {
                return Err(Error::ShapeMismatch {
                    op: "copy_from",
                    lhs: dst.shape.clone(),
                    rhs: src.shape.clone(),
                });
            }
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }

    /// Stores a gradient map into the `grad` slot of each parameter.
    pub fn attach_grads(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            self.tensors[id.0].set_grad(g.to_vec());
        }
    }
}

/// Gradient map from parameter id to a dense gradient buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    fn slot_mut(&mut self, id: ParamId, len: usize) -> &mut Vec<f64> {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// `self ← self + scale · other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in other.iter() {
            let slot = self.slot_mut(id, g.len());
            for (a, b) in slot.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().flatten().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dims {
    d: [usize; 2],
    rank: u8,
}

impl Dims {
    fn vector(n: usize) -> Self {
        Dims { d: [n, 1], rank: 1 }
    }
    fn matrix(r: usize, c: usize) -> Self {
        Dims { d: [r, c], rank: 2 }
    }
    fn len(&self) -> usize {
        self.d[0] * self.d[1]
    }
    fn to_vec(self) -> Vec<usize> {
        match self.rank {
            1 => vec![self.d[0]],
            _ => vec![self.d[0], self.d[1]],
        }
    }
    fn from_shape(shape: &[usize]) -> Result<Self> {
        match shape {
            [n] => Ok(Dims::vector(*n)),
            [r, c] => Ok(Dims::matrix(*r, *c)),
            _ => Err(Error::InvalidTensor(format!(
                "graph nodes are rank 1 or 2, got {shape:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MatVec(Var, Var),
    MatTVec(Var, Var),
    Row(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Dot(Var, Var),
    Pick(Var, usize),
    Slice(Var, usize),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Gru(Var, Var, Var),
    Nll(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    dims: Dims,
    values: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Graph<'p> {
    params: Option<&'p ParamSet>,
    track: bool,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(out: &mut [f64], logits: &[f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn log_softmax_in_place(out: &mut [f64], logits: &[f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

/// Numerically stable softmax of a vector of logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let mut out = vec![0.0; logits.len()];
    softmax_in_place(&mut out, logits.values());
    Tensor::new(logits.shape().to_vec(), out)
}

/// `log(softmax(logits))` on a plain slice.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let mut out = vec![0.0; logits.len()];
    log_softmax_in_place(&mut out, logits);
    Ok(out)
}

/// `-Σ_t log p[t, target_t]` for a `[T, V]` matrix of per-step distributions.
pub fn sequence_nll(stepwise_probs: &Tensor, targets: &[usize]) -> Result<f64> {
    let (t, v) = match stepwise_probs.shape() {
        [t, v] => (*t, *v),
        other => {
            return Err(Error::InvalidTensor(format!(
                "sequence_nll expects [T, V], got {other:?}"
            )))
        }
    };
    if targets.len() != t {
        return Err(Error::ShapeMismatch {
            op: "sequence_nll",
            lhs: vec![t],
            rhs: vec![targets.len()],
        });
    }
    let mut total = 0.0;
    for (step, &target) in targets.iter().enumerate() {
        if target >= v {
            return Err(Error::TokenOutOfVocab {
                id: target,
                vocab_size: v,
            });
        }
        total -= stepwise_probs.values()[step * v + target].ln();
    }
    Ok(total)
}

impl<'p> Graph<'p> {
    /// Graph over `params` that records gradients for every parameter it touches.
    pub fn new(params: &'p ParamSet) -> Self {
        Self::build(Some(params), true)
    }

    /// Forward-only graph: parameters are read but never differentiated.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self::build(Some(params), false)
    }

    /// Graph with no parameter set, for computations over constants only.
    pub fn detached() -> Graph<'static> {
        Graph::build(None, true)
    }

    fn build(params: Option<&'p ParamSet>, track: bool) -> Self {
        Self {
            params,
            track,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.map_or(0, ParamSet::len)],
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].dims
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self
                .params
                .expect("parameter node without a parameter set")
                .get(id)
                .values(),
            _ => &node.values,
        }
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.dims(v).to_vec()
    }

    /// Gradient of the last `backward` target with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Snapshot of a node as a [`Tensor`], including its gradient after a backward pass.
    pub fn tensor(&self, v: Var) -> Tensor {
        let mut t = Tensor {
            shape: self.shape(v),
            values: self.value(v).to_vec(),
            requires_grad: self.rg(v),
            grad: None,
        };
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec());
        }
        t
    }

    fn push(&mut self, dims: Dims, values: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || values.len() == dims.len());
        self.nodes.push(Node {
            dims,
            values,
            op,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let params = self.params.expect("parameter lookup on a detached graph");
        let dims = Dims::from_shape(params.get(id).shape()).expect("parameter rank");
        let v = self.push(dims, Vec::new(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, tensor: &Tensor) -> Result<Var> {
        let dims = Dims::from_shape(tensor.shape())?;
        Ok(self.push(dims, tensor.values().to_vec(), Op::Leaf, false))
    }

    pub fn vector(&mut self, values: Vec<f64>) -> Var {
        self.push(Dims::vector(values.len()), values, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.vector(vec![value])
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.vector(vec![0.0; n])
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<Dims> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != db.len() || da.d != db.d {
            return Err(Error::ShapeMismatch {
                op,
                lhs: da.to_vec(),
                rhs: db.to_vec(),
            });
        }
        Ok(da)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Dims, Vec<f64>)> {
        let dims = self.same_dims(op, a, b)?;
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((dims, values))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dims, values) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(dims, values, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dims, values) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(dims, values, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dims, values) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(dims, values, Op::Mul(a, b), rg))
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let values = self.value(a).iter().map(|&x| scale * x + shift).collect();
        let (dims, rg) = (self.dims(a), self.rg(a));
        self.push(dims, values, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    /// Matrix `[m, n]` times vector `[n]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (dw, dx) = (self.dims(w), self.dims(x));
        if dw.rank != 2 || dx.rank != 1 || dw.d[1] != dx.d[0] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: dw.to_vec(),
                rhs: dx.to_vec(),
            });
        }
        let (m, n) = (dw.d[0], dw.d[1]);
        let (wv, xv) = (self.value(w), self.value(x));
        let values = (0..m)
            .map(|i| {
                wv[i * n..(i + 1) * n]
                    .iter()
                    .zip(xv)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(Dims::vector(m), values, Op::MatVec(w, x), rg))
    }

    /// Transposed matrix `[m, n]ᵀ` times vector `[m]`.
    pub fn mat_t_vec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (dw, dx) = (self.dims(w), self.dims(x));
        if dw.rank != 2 || dx.rank != 1 || dw.d[0] != dx.d[0] {
            return Err(Error::ShapeMismatch {
                op: "mat_t_vec",
                lhs: dw.to_vec(),
                rhs: dx.to_vec(),
            });
        }
        let (m, n) = (dw.d[0], dw.d[1]);
        let (wv, xv) = (self.value(w), self.value(x));
        let mut values = vec![0.0; n];
        for i in 0..m {
            let xi = xv[i];
            for (o, a) in values.iter_mut().zip(&wv[i * n..(i + 1) * n]) {
                *o += a * xi;
            }
        }
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(Dims::vector(n), values, Op::MatTVec(w, x), rg))
    }

    /// Row `index` of a matrix (embedding lookup).
    pub fn row(&mut self, m: Var, index: usize) -> Result<Var> {
        let d = self.dims(m);
        if d.rank != 2 {
            return Err(Error::InvalidTensor("row of a non-matrix".into()));
        }
        if index >= d.d[0] {
            return Err(Error::TokenOutOfVocab {
                id: index,
                vocab_size: d.d[0],
            });
        }
        let n = d.d[1];
        let values = self.value(m)[index * n..(index + 1) * n].to_vec();
        let rg = self.rg(m);
        Ok(self.push(Dims::vector(n), values, Op::Row(m, index), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let values = self.value(a).iter().map(|&x| f(x)).collect();
        let (dims, rg) = (self.dims(a), self.rg(a));
        self.push(dims, values, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.dims(a);
        if d.len() == 0 {
            return Err(Error::EmptyLogits);
        }
        let mut values = vec![0.0; d.len()];
        softmax_in_place(&mut values, self.value(a));
        let rg = self.rg(a);
        Ok(self.push(Dims::vector(d.len()), values, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.dims(a);
        if d.len() == 0 {
            return Err(Error::EmptyLogits);
        }
        let mut values = vec![0.0; d.len()];
        log_softmax_in_place(&mut values, self.value(a));
        let rg = self.rg(a);
        Ok(self.push(Dims::vector(d.len()), values, Op::LogSoftmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Dims::vector(1), vec![s], Op::Sum(a), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("dot", a, b)?;
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Dims::vector(1), vec![s], Op::Dot(a, b), rg))
    }

    /// Scalar element `index` of a flattened node.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let n = self.dims(a).len();
        if index >= n {
            return Err(Error::TokenOutOfVocab {
                id: index,
                vocab_size: n,
            });
        }
        let v = self.value(a)[index];
        let rg = self.rg(a);
        Ok(self.push(Dims::vector(1), vec![v], Op::Pick(a, index), rg))
    }

    /// Contiguous sub-vector `[start, start + len)`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.dims(a).len();
        if start + len > n || len == 0 {
            return Err(Error::InvalidTensor(format!(
                "slice [{start}, {}) of length {n}",
                start + len
            )));
        }
        let values = self.value(a)[start..start + len].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Dims::vector(len), values, Op::Slice(a, start), rg))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidTensor("concat of nothing".into()));
        }
        let mut values = Vec::new();
        for &p in parts {
            values.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Dims::vector(values.len()),
            values,
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks equal-length vectors into a `[k, n]` matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows
            .first()
            .ok_or_else(|| Error::InvalidTensor("stack of nothing".into()))?;
        let n = self.dims(first).len();
        let mut values = Vec::with_capacity(n * rows.len());
        for &r in rows {
            if self.dims(r).len() != n {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: self.shape(first),
                    rhs: self.shape(r),
                });
            }
            values.extend_from_slice(self.value(r));
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        Ok(self.push(
            Dims::matrix(rows.len(), n),
            values,
            Op::Stack(rows.to_vec()),
            rg,
        ))
    }

    /// Gated recurrent update from pre-activations.
    ///
    /// `gx = W·x + b` and `gh = U·h` are `[3H]` with blocks (update, reset,
    /// candidate); `h` is the previous state `[H]`. Returns
    /// `(1 - z)·n + z·h` with `z = σ(gx_z + gh_z)`, `r = σ(gx_r + gh_r)`,
    /// `n = tanh(gx_n + r·gh_n)`.
    pub fn gru(&mut self, gx: Var, gh: Var, h: Var) -> Result<Var> {
        let hn = self.dims(h).len();
        if self.dims(gx).len() != 3 * hn || self.dims(gh).len() != 3 * hn {
            return Err(Error::ShapeMismatch {
                op: "gru",
                lhs: self.shape(gx),
                rhs: self.shape(h),
            });
        }
        let (xv, hv, prev) = (self.value(gx), self.value(gh), self.value(h));
        let mut values = vec![0.0; hn];
        for i in 0..hn {
            let z = sigmoid(xv[i] + hv[i]);
            let r = sigmoid(xv[hn + i] + hv[hn + i]);
            let n = (xv[2 * hn + i] + r * hv[2 * hn + i]).tanh();
            values[i] = (1.0 - z) * n + z * prev[i];
        }
        let rg = self.rg(gx) || self.rg(gh) || self.rg(h);
        Ok(self.push(Dims::vector(hn), values, Op::Gru(gx, gh, h), rg))
    }

    /// `-Σ_t log probs[t, targets[t]]` on a `[T, V]` node.
    pub fn sequence_nll(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let d = self.dims(probs);
        let (t, v) = (d.d[0], d.d[1]);
        if d.rank != 2 || targets.len() != t {
            return Err(Error::ShapeMismatch {
                op: "sequence_nll",
                lhs: d.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfVocab {
                id: bad,
                vocab_size: v,
            });
        }
        let pv = self.value(probs);
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(s, &id)| pv[s * v + id].ln())
            .sum::<f64>();
        let rg = self.rg(probs);
        Ok(self.push(
            Dims::vector(1),
            vec![loss],
            Op::Nll(probs, targets.to_vec()),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every parameter it reaches.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let d = self.dims(loss);
        if d.len() != 1 {
            return Err(Error::NonScalarLoss(d.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out = Gradients::new();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, &mut out);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let node = &self.nodes[i];
        let y = &node.values;
        // Accumulates into the gradient buffer of `v` when it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let n = self.nodes[v.0].dims.len();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = out.slot_mut(*id, g.len());
                slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x += d)
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                });
            }
            Op::Affine(a, s) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += s * d)
                });
            }
            Op::MatVec(w, x) => {
                let dw = self.dims(*w);
                let (m, n) = (dw.d[0], dw.d[1]);
                let (wv, xv) = (self.value(*w), self.value(*x));
                acc(*w, &mut |gw| {
                    for r in 0..m {
                        let gr = g[r];
                        if gr != 0.0 {
                            for (o, xc) in gw[r * n..(r + 1) * n].iter_mut().zip(xv) {
                                *o += gr * xc;
                            }
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        let gr = g[r];
                        for (o, wc) in gx.iter_mut().zip(&wv[r * n..(r + 1) * n]) {
                            *o += gr * wc;
                        }
                    }
                });
            }
            Op::MatTVec(w, x) => {
                let dw = self.dims(*w);
                let (m, n) = (dw.d[0], dw.d[1]);
                let (wv, xv) = (self.value(*w), self.value(*x));
                acc(*w, &mut |gw| {
                    for r in 0..m {
                        let xr = xv[r];
                        for (o, gc) in gw[r * n..(r + 1) * n].iter_mut().zip(g) {
                            *o += xr * gc;
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        gx[r] += wv[r * n..(r + 1) * n]
                            .iter()
                            .zip(g)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                });
            }
            Op::Row(m, index) => {
                let n = g.len();
                acc(*m, &mut |gm| {
                    for (o, d) in gm[index * n..(index + 1) * n].iter_mut().zip(g) {
                        *o += d;
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for k in 0..g.len() {
                    ga[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for k in 0..g.len() {
                    ga[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for k in 0..g.len() {
                    ga[k] += g[k] * y[k];
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / av[k];
                    }
                })
            }
            Op::Square(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += 2.0 * g[k] * av[k];
                    }
                })
            }
            Op::Softmax(a) => {
                let inner: f64 = g.iter().zip(y).map(|(d, s)| d * s).sum();
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += y[k] * (g[k] - inner);
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let total: f64 = g.iter().sum();
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] - y[k].exp() * total;
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[0] * bv[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] += g[0] * av[k];
                    }
                });
            }
            Op::Pick(a, index) => acc(*a, &mut |ga| ga[*index] += g[0]),
            Op::Slice(a, start) => acc(*a, &mut |ga| {
                for (o, d) in ga[*start..*start + g.len()].iter_mut().zip(g) {
                    *o += d;
                }
            }),
            Op::Concat(parts) | Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.dims(p).len();
                    let seg = &g[offset..offset + n];
                    acc(p, &mut |gp| {
                        gp.iter_mut().zip(seg).for_each(|(x, d)| *x += d)
                    });
                    offset += n;
                }
            }
            Op::Gru(gx, gh, h) => {
                let hn = g.len();
                let (xv, hv, prev) = (self.value(*gx), self.value(*gh), self.value(*h));
                let mut dx = vec![0.0; 3 * hn];
                let mut dhh = vec![0.0; 3 * hn];
                let mut dprev = vec![0.0; hn];
                for k in 0..hn {
                    let z = sigmoid(xv[k] + hv[k]);
                    let r = sigmoid(xv[hn + k] + hv[hn + k]);
                    let n = (xv[2 * hn + k] + r * hv[2 * hn + k]).tanh();
                    let dz = g[k] * (prev[k] - n);
                    let dn = g[k] * (1.0 - z);
                    dprev[k] = g[k] * z;
                    let dpre_n = dn * (1.0 - n * n);
                    let dr = dpre_n * hv[2 * hn + k];
                    let dpre_r = dr * r * (1.0 - r);
                    let dpre_z = dz * z * (1.0 - z);
                    dx[k] = dpre_z;
                    dx[hn + k] = dpre_r;
                    dx[2 * hn + k] = dpre_n;
                    dhh[k] = dpre_z;
                    dhh[hn + k] = dpre_r;
                    dhh[2 * hn + k] = dpre_n * r;
                }
                acc(*gx, &mut |o| {
                    o.iter_mut().zip(&dx).for_each(|(a, b)| *a += b)
                });
                acc(*gh, &mut |o| {
                    o.iter_mut().zip(&dhh).for_each(|(a, b)| *a += b)
                });
                acc(*h, &mut |o| {
                    o.iter_mut().zip(&dprev).for_each(|(a, b)| *a += b)
                });
            }
            Op::Nll(probs, targets) => {
                let v = self.dims(*probs).d[1];
                let pv = self.value(*probs);
                acc(*probs, &mut |gp| {
                    for (s, &id) in targets.iter().enumerate() {
                        gp[s * v + id] -= g[0] / pv[s * v + id];
                    }
                })
            }
        }
    }
}

/// Maximum relative error between analytic gradients and central differences.
///
/// `f` builds a scalar loss on the supplied graph. The error for each
/// coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<F>(params: &ParamSet, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let coords: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |k| (id, k)))
        .collect();
    finite_difference_check_coords(params, eps, &coords, f)
}

/// As [`finite_difference_check`], restricted to the listed `(parameter, index)` coordinates.
pub fn finite_difference_check_coords<F>(
    params: &ParamSet,
    eps: f64,
    coords: &[(ParamId, usize)],
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidEpsilon(eps));
    }
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::inference(p);
        let loss = f(&mut g)?;
        let d = g.dims(loss);
        if d.len() != 1 {
            return Err(Error::NonScalarLoss(d.to_vec()));
        }
        Ok(g.scalar_value(loss))
    };
    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministicFunction { first, second });
    }

    let mut g = Graph::new(params);
    let loss = f(&mut g)?;
    let analytic = g.backward(loss)?;

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for &(id, k) in coords {
        let orig = probe.get(id).values()[k];
        probe.get_mut(id).values_mut()[k] = orig + eps;
        let plus = eval(&probe)?;
        probe.get_mut(id).values_mut()[k] = orig - eps;
        let minus = eval(&probe)?;
        probe.get_mut(id).values_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let exact = analytic.get(id).map_or(0.0, |gr| gr[k]);
        worst = worst.max((exact - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
