//! Dense reverse-mode automatic differentiation over row-major `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass as an append-only list
//! of nodes. Trainable weights live in a [`ParamStore`] that the tape borrows
//! immutably; [`Tape::backward`] walks the nodes in reverse and returns one
//! gradient per stored parameter (zero when the parameter was never touched).
//!
//! Vectors have shape `[n]`, matrices `[rows, cols]`, scalars `[1]`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("loss is not deterministic: {first} then {second} at the same point")]
    Nondeterministic { first: f64, second: f64 },
}

fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension { op, detail: detail.into() })
}

/// Row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return dim_err("tensor", format!("shape {shape:?} must be non-empty and positive"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(
                "tensor",
                format!("shape {shape:?} holds {n} values but {} were given", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Panics on an empty slice.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return dim_err("from_rows", "no rows");
        };
        let cols = first.len();
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("from_rows", "ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a matrix; 1 for a vector.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Named trainable tensors, kept in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

/// Gradient of a scalar loss with respect to every parameter of a store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let grads = store
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Self { grads }
    }

    /// Wraps explicit gradient values, one tensor per parameter name.
    pub fn from_store(values: &ParamStore) -> Self {
        Self { grads: values.iter().map(|(k, v)| (k.clone(), v.clone())).collect() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` entry-wise; both must come from the same store.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(mine) => mine.add_assign(g),
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// First parameter holding a NaN or infinite entry.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.grads
            .iter()
            .find(|(_, g)| !g.is_finite())
            .map(|(k, _)| k.as_str())
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x); returns `x` itself above 30.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Stable log Σ exp over a non-empty slice.
pub fn logsumexp_slice(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if v.len() == 1 {
        return v[0];
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Softmax of a plain slice.
pub fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    out
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Sigmoid => sigmoid(x),
            Nonlinearity::Softplus => softplus(x),
            Nonlinearity::Exp => x.exp(),
            Nonlinearity::Log => x.ln(),
            Nonlinearity::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => 1.0 - y * y,
            Nonlinearity::Sigmoid => y * (1.0 - y),
            Nonlinearity::Softplus => sigmoid(x),
            Nonlinearity::Exp => y,
            Nonlinearity::Log => 1.0 / x,
            Nonlinearity::Square => 2.0 * x,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    Affine { w: Var, x: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowVector { x: Var, v: Var },
    SubColVector { x: Var, v: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Nonlinearity),
    Sum(Var),
    SumCols(Var),
    MeanRows(Var),
    LogSumExp(Var),
    LogSumExpRows(Var),
    Softmax(Var),
    LogSoftmaxRows(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Select { v: Var, ids: Vec<usize> },
    GatherCols { x: Var, ids: Vec<usize> },
    Pick { x: Var, ids: Vec<usize> },
    Transpose(Var),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    Row { x: Var, index: usize },
    Slice { x: Var, start: usize },
    RepeatRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of one forward pass.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
}

impl fmt::Debug for Tape<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Param(name.to_string()));
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// `W x + b` for a matrix `[o, i]`, vector `[i]` and bias `[o]`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (wt, xt, bt) = (self.value(w), self.value(x), self.value(b));
        if !wt.is_matrix() || !xt.is_vector() || !bt.is_vector() {
            return dim_err(
                "affine",
                format!("W {:?}, x {:?}, b {:?} must be matrix, vector, vector", wt.shape, xt.shape, bt.shape),
            );
        }
        let (o, i) = (wt.shape[0], wt.shape[1]);
        if xt.len() != i || bt.len() != o {
            return dim_err(
                "affine",
                format!("W {:?} does not conform with x {:?} and b {:?}", wt.shape, xt.shape, bt.shape),
            );
        }
        let data = (0..o)
            .map(|r| dot(&wt.data[r * i..(r + 1) * i], &xt.data) + bt.data[r])
            .collect();
        Ok(self.push(Tensor { shape: vec![o], data }, Op::Affine { w, x, b }))
    }

    /// Row-wise `X Wᵀ (+ b)`: `[r, i] × [o, i] → [r, o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if !xt.is_matrix() || !wt.is_matrix() || xt.shape[1] != wt.shape[1] {
            return dim_err("linear", format!("X {:?} and W {:?} do not conform", xt.shape, wt.shape));
        }
        let (r, i, o) = (xt.shape[0], xt.shape[1], wt.shape[0]);
        let bias = match b {
            Some(b) => {
                let bt = self.value(b);
                if !bt.is_vector() || bt.len() != o {
                    return dim_err("linear", format!("bias {:?} does not match {o} outputs", bt.shape));
                }
                Some(bt.data.as_slice())
            }
            None => None,
        };
        let mut out = vec![0.0; r * o];
        for a in 0..r {
            let xr = &xt.data[a * i..(a + 1) * i];
            for c in 0..o {
                let mut v = dot(xr, &wt.data[c * i..(c + 1) * i]);
                if let Some(bias) = bias {
                    v += bias[c];
                }
                out[a * o + c] = v;
            }
        }
        Ok(self.push(Tensor { shape: vec![r, o], data: out }, Op::Linear { x, w, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (at, bt) = (self.value(a), self.value(b));
        let data = at.data.iter().zip(&bt.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = at.shape.clone();
        Ok(self.push(Tensor { shape, data }, node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds vector `v [c]` to every row of `x [r, c]`.
    pub fn add_row_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xt, vt) = (self.value(x), self.value(v));
        if !xt.is_matrix() || !vt.is_vector() || vt.len() != xt.shape[1] {
            return dim_err("add_row_vector", format!("{:?} + {:?}", xt.shape, vt.shape));
        }
        let c = xt.shape[1];
        let data = xt.data.iter().enumerate().map(|(k, a)| a + vt.data[k % c]).collect();
        let shape = xt.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::AddRowVector { x, v }))
    }

    /// Subtracts `v[r]` from every entry of row `r` of `x [r, c]`.
    pub fn sub_col_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xt, vt) = (self.value(x), self.value(v));
        if !xt.is_matrix() || !vt.is_vector() || vt.len() != xt.shape[0] {
            return dim_err("sub_col_vector", format!("{:?} - {:?}", xt.shape, vt.shape));
        }
        let c = xt.shape[1];
        let data = xt.data.iter().enumerate().map(|(k, a)| a - vt.data[k / c]).collect();
        let shape = xt.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::SubColVector { x, v }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|a| a * factor).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|a| a + c).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::AddScalar(x))
    }

    pub fn unary(&mut self, kind: Nonlinearity, x: Var) -> Result<Var> {
        let t = self.value(x);
        if kind == Nonlinearity::Log {
            if let Some(bad) = t.data.iter().find(|v| !(**v > 0.0)) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let data = t.data.iter().map(|a| kind.apply(*a)).collect();
        let shape = t.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Unary(x, kind)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Nonlinearity::Tanh, x).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Nonlinearity::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Nonlinearity::Softplus, x).expect("softplus is total")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Nonlinearity::Square, x).expect("square is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Nonlinearity::Log, x)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Per-row sums of a matrix `[r, c] → [r]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() {
            return dim_err("sum_cols", format!("expected matrix, got {:?}", t.shape));
        }
        let data = (0..t.shape[0]).map(|r| t.row(r).iter().sum()).collect();
        Ok(self.push(Tensor { shape: vec![t.shape[0]], data }, Op::SumCols(x)))
    }

    /// Column means of a matrix `[r, c] → [c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() {
            return dim_err("mean_rows", format!("expected matrix, got {:?}", t.shape));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; c];
        for a in 0..r {
            for (d, v) in data.iter_mut().zip(t.row(a)) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= r as f64);
        Ok(self.push(Tensor { shape: vec![c], data }, Op::MeanRows(x)))
    }

    pub fn logsumexp(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        if !t.is_vector() {
            return dim_err("logsumexp", format!("expected vector, got {:?}", t.shape));
        }
        let s = logsumexp_slice(&t.data);
        Ok(self.push(Tensor::scalar(s), Op::LogSumExp(v)))
    }

    /// Row-wise logsumexp `[r, c] → [r]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() {
            return dim_err("logsumexp_rows", format!("expected matrix, got {:?}", t.shape));
        }
        let data = (0..t.shape[0]).map(|r| logsumexp_slice(t.row(r))).collect();
        Ok(self.push(Tensor { shape: vec![t.shape[0]], data }, Op::LogSumExpRows(x)))
    }

    pub fn softmax(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        if !t.is_vector() {
            return dim_err("softmax", format!("expected vector, got {:?}", t.shape));
        }
        let data = softmax_slice(&t.data);
        Ok(self.push(Tensor { shape: t.shape.clone(), data }, Op::Softmax(v)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() {
            return dim_err("log_softmax_rows", format!("expected matrix, got {:?}", t.shape));
        }
        let c = t.shape[1];
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.shape[0] {
            let row = t.row(r);
            let lse = logsumexp_slice(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        Ok(self.push(Tensor { shape: vec![t.shape[0], c], data }, Op::LogSoftmaxRows(x)))
    }

    /// Rows `ids` of a matrix, stacked in order.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if !t.is_matrix() || ids.is_empty() {
            return dim_err("gather_rows", format!("table {:?} with {} ids", t.shape, ids.len()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.shape[0]) {
            return dim_err("gather_rows", format!("row {bad} out of range for {:?}", t.shape));
        }
        let c = t.shape[1];
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        Ok(self.push(Tensor { shape: vec![ids.len(), c], data }, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    /// Entries `ids` of a vector.
    pub fn select(&mut self, v: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(v);
        if !t.is_vector() || ids.is_empty() {
            return dim_err("select", format!("vector {:?} with {} ids", t.shape, ids.len()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.len()) {
            return dim_err("select", format!("index {bad} out of range for {:?}", t.shape));
        }
        let data = ids.iter().map(|&i| t.data[i]).collect();
        Ok(self.push(Tensor { shape: vec![ids.len()], data }, Op::Select { v, ids: ids.to_vec() }))
    }

    /// Columns `ids` of a matrix `[r, c] → [r, k]`.
    pub fn gather_cols(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() || ids.is_empty() {
            return dim_err("gather_cols", format!("matrix {:?} with {} ids", t.shape, ids.len()));
        }
        let c = t.shape[1];
        if let Some(&bad) = ids.iter().find(|&&i| i >= c) {
            return dim_err("gather_cols", format!("column {bad} out of range for {:?}", t.shape));
        }
        let r = t.shape[0];
        let mut data = Vec::with_capacity(r * ids.len());
        for a in 0..r {
            let row = t.row(a);
            data.extend(ids.iter().map(|&i| row[i]));
        }
        Ok(self.push(Tensor { shape: vec![r, ids.len()], data }, Op::GatherCols { x, ids: ids.to_vec() }))
    }

    /// One entry per row: `out[r] = x[r, ids[r]]`.
    pub fn pick(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() || ids.len() != t.shape[0] {
            return dim_err("pick", format!("matrix {:?} with {} ids", t.shape, ids.len()));
        }
        let c = t.shape[1];
        if let Some(&bad) = ids.iter().find(|&&i| i >= c) {
            return dim_err("pick", format!("column {bad} out of range for {:?}", t.shape));
        }
        let data = ids.iter().enumerate().map(|(r, &i)| t.data[r * c + i]).collect();
        Ok(self.push(Tensor { shape: vec![ids.len()], data }, Op::Pick { x, ids: ids.to_vec() }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() {
            return dim_err("transpose", format!("expected matrix, got {:?}", t.shape));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; r * c];
        for a in 0..r {
            for b in 0..c {
                data[b * r + a] = t.data[a * c + b];
            }
        }
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(x)))
    }

    /// `[r, p] ‖ [r, q] → [r, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if !at.is_matrix() || !bt.is_matrix() || at.shape[0] != bt.shape[0] {
            return dim_err("concat_cols", format!("{:?} ‖ {:?}", at.shape, bt.shape));
        }
        let r = at.shape[0];
        let mut data = Vec::with_capacity(at.len() + bt.len());
        for k in 0..r {
            data.extend_from_slice(at.row(k));
            data.extend_from_slice(bt.row(k));
        }
        let shape = vec![r, at.shape[1] + bt.shape[1]];
        Ok(self.push(Tensor { shape, data }, Op::ConcatCols(a, b)))
    }

    /// Stacks equal-length vectors into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return dim_err("stack_rows", "no rows");
        };
        let c = self.value(first).len();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            let t = self.value(r);
            if !t.is_vector() || t.len() != c {
                return dim_err("stack_rows", format!("row {:?} differs from width {c}", t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(self.push(Tensor { shape: vec![rows.len(), c], data }, Op::StackRows(rows.to_vec())))
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if !t.is_matrix() || index >= t.shape[0] {
            return dim_err("row", format!("row {index} of {:?}", t.shape));
        }
        let data = t.row(index).to_vec();
        Ok(self.push(Tensor { shape: vec![data.len()], data }, Op::Row { x, index }))
    }

    /// Contiguous sub-vector `[start, start + len)`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if !t.is_vector() || len == 0 || start + len > t.len() {
            return dim_err("slice", format!("[{start}, {}) of {:?}", start + len, t.shape));
        }
        let data = t.data[start..start + len].to_vec();
        Ok(self.push(Tensor { shape: vec![len], data }, Op::Slice { x, start }))
    }

    /// Broadcasts a vector `[c]` to `[times, c]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = self.value(x);
        if !t.is_vector() || times == 0 {
            return dim_err("repeat_rows", format!("{:?} × {times}", t.shape));
        }
        let c = t.len();
        let data = t.data.repeat(times);
        Ok(self.push(Tensor { shape: vec![times, c], data }, Op::RepeatRows(x)))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(TensorError::NotScalar(root_value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.store);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    if let Some(t) = out.grads.get_mut(name) {
                        for (a, b) in t.data.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                }
                Op::Affine { w, x, b } => {
                    let (wt, xt) = (self.value(*w), self.value(*x));
                    let i = wt.shape[1];
                    let gw = acc(&mut grads, *w, wt.len());
                    for (r, gr) in g.iter().enumerate() {
                        for (k, xv) in xt.data.iter().enumerate() {
                            gw[r * i + k] += gr * xv;
                        }
                    }
                    let gx = acc(&mut grads, *x, i);
                    for (r, gr) in g.iter().enumerate() {
                        for (gk, wk) in gx.iter_mut().zip(&wt.data[r * i..(r + 1) * i]) {
                            *gk += wk * gr;
                        }
                    }
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::Linear { x, w, b } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (r, i, o) = (xt.shape[0], xt.shape[1], wt.shape[0]);
                    let gx = acc(&mut grads, *x, r * i);
                    for a in 0..r {
                        for c in 0..o {
                            let gv = g[a * o + c];
                            if gv == 0.0 {
                                continue;
                            }
                            let wr = &wt.data[c * i..(c + 1) * i];
                            for k in 0..i {
                                gx[a * i + k] += gv * wr[k];
                            }
                        }
                    }
                    let gw = acc(&mut grads, *w, o * i);
                    for a in 0..r {
                        let xr = &xt.data[a * i..(a + 1) * i];
                        for c in 0..o {
                            let gv = g[a * o + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for k in 0..i {
                                gw[c * i + k] += gv * xr[k];
                            }
                        }
                    }
                    if let Some(b) = b {
                        let gb = acc(&mut grads, *b, o);
                        for a in 0..r {
                            for c in 0..o {
                                gb[c] += g[a * o + c];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let gb = acc(&mut grads, *b, g.len());
                    for (d, v) in gb.iter_mut().zip(&g) {
                        *d -= v;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
                Op::AddRowVector { x, v } => {
                    add_into(acc(&mut grads, *x, g.len()), &g);
                    let c = self.value(*v).len();
                    let gv = acc(&mut grads, *v, c);
                    for (k, val) in g.iter().enumerate() {
                        gv[k % c] += val;
                    }
                }
                Op::SubColVector { x, v } => {
                    add_into(acc(&mut grads, *x, g.len()), &g);
                    let c = self.value(*x).shape[1];
                    let r = self.value(*v).len();
                    let gv = acc(&mut grads, *v, r);
                    for (k, val) in g.iter().enumerate() {
                        gv[k / c] -= val;
                    }
                }
                Op::Scale(x, f) => {
                    let gx = acc(&mut grads, *x, g.len());
                    for (d, v) in gx.iter_mut().zip(&g) {
                        *d += v * f;
                    }
                }
                Op::AddScalar(x) => add_into(acc(&mut grads, *x, g.len()), &g),
                Op::Unary(x, kind) => {
                    let xv = &self.value(*x).data;
                    let yv = &node.value.data;
                    let gx = acc(&mut grads, *x, g.len());
                    for k in 0..g.len() {
                        gx[k] += g[k] * kind.derivative(xv[k], yv[k]);
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    let gx = acc(&mut grads, *x, n);
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::SumCols(x) => {
                    let t = self.value(*x);
                    let c = t.shape[1];
                    let gx = acc(&mut grads, *x, t.len());
                    for (k, d) in gx.iter_mut().enumerate() {
                        *d += g[k / c];
                    }
                }
                Op::MeanRows(x) => {
                    let t = self.value(*x);
                    let (r, c) = (t.shape[0], t.shape[1]);
                    let gx = acc(&mut grads, *x, t.len());
                    for (k, d) in gx.iter_mut().enumerate() {
                        *d += g[k % c] / r as f64;
                    }
                }
                Op::LogSumExp(v) => {
                    let p = softmax_slice(&self.value(*v).data);
                    let gv = acc(&mut grads, *v, p.len());
                    for (d, pk) in gv.iter_mut().zip(&p) {
                        *d += g[0] * pk;
                    }
                }
                Op::LogSumExpRows(x) => {
                    let t = self.value(*x);
                    let c = t.shape[1];
                    let gx = acc(&mut grads, *x, t.len());
                    let mut p = vec![0.0; c];
                    for (r, gr) in g.iter().enumerate() {
                        softmax_into(t.row(r), &mut p);
                        for k in 0..c {
                            gx[r * c + k] += gr * p[k];
                        }
                    }
                }
                Op::Softmax(v) => {
                    let y = &node.value.data;
                    let inner: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    let gv = acc(&mut grads, *v, y.len());
                    for k in 0..y.len() {
                        gv[k] += y[k] * (g[k] - inner);
                    }
                }
                Op::LogSoftmaxRows(x) => {
                    let y = &node.value;
                    let c = y.shape[1];
                    let gx = acc(&mut grads, *x, y.len());
                    for r in 0..y.shape[0] {
                        let gs: f64 = g[r * c..(r + 1) * c].iter().sum();
                        for k in 0..c {
                            gx[r * c + k] += g[r * c + k] - y.data[r * c + k].exp() * gs;
                        }
                    }
                }
                Op::GatherRows { table, ids } => {
                    let t = self.value(*table);
                    let c = t.shape[1];
                    let gt = acc(&mut grads, *table, t.len());
                    for (k, &i) in ids.iter().enumerate() {
                        for q in 0..c {
                            gt[i * c + q] += g[k * c + q];
                        }
                    }
                }
                Op::Select { v, ids } => {
                    let n = self.value(*v).len();
                    let gv = acc(&mut grads, *v, n);
                    for (k, &i) in ids.iter().enumerate() {
                        gv[i] += g[k];
                    }
                }
                Op::GatherCols { x, ids } => {
                    let t = self.value(*x);
                    let c = t.shape[1];
                    let k = ids.len();
                    let gx = acc(&mut grads, *x, t.len());
                    for r in 0..t.shape[0] {
                        for (q, &i) in ids.iter().enumerate() {
                            gx[r * c + i] += g[r * k + q];
                        }
                    }
                }
                Op::Pick { x, ids } => {
                    let t = self.value(*x);
                    let c = t.shape[1];
                    let gx = acc(&mut grads, *x, t.len());
                    for (r, &i) in ids.iter().enumerate() {
                        gx[r * c + i] += g[r];
                    }
                }
                Op::Transpose(x) => {
                    let t = self.value(*x);
                    let (r, c) = (t.shape[0], t.shape[1]);
                    let gx = acc(&mut grads, *x, t.len());
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (p, q) = (self.value(*a).shape[1], self.value(*b).shape[1]);
                    let r = self.value(*a).shape[0];
                    {
                        let ga = acc(&mut grads, *a, r * p);
                        for k in 0..r {
                            for c in 0..p {
                                ga[k * p + c] += g[k * (p + q) + c];
                            }
                        }
                    }
                    let gb = acc(&mut grads, *b, r * q);
                    for k in 0..r {
                        for c in 0..q {
                            gb[k * q + c] += g[k * (p + q) + p + c];
                        }
                    }
                }
                Op::StackRows(rows) => {
                    let c = node.value.shape[1];
                    for (k, r) in rows.iter().enumerate() {
                        add_into(acc(&mut grads, *r, c), &g[k * c..(k + 1) * c]);
                    }
                }
                Op::Row { x, index } => {
                    let t = self.value(*x);
                    let c = t.cols();
                    let gx = acc(&mut grads, *x, t.len());
                    add_into(&mut gx[index * c..(index + 1) * c], &g);
                }
                Op::Slice { x, start } => {
                    let n = self.value(*x).len();
                    let gx = acc(&mut grads, *x, n);
                    add_into(&mut gx[*start..*start + g.len()], &g);
                }
                Op::RepeatRows(x) => {
                    let c = self.value(*x).len();
                    let gx = acc(&mut grads, *x, c);
                    for (k, v) in g.iter().enumerate() {
                        gx[k % c] += v;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn is_empty(&self) -> bool {
        self.entries_checked == 0
    }
}

/// Floor on the relative-error denominator; below it the error is absolute.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares `backward` against central differences for every scalar entry of
/// every parameter in `params`.
///
/// `loss` must build a scalar on the given tape and be deterministic: it is
/// evaluated twice at the starting point and the two values must agree bitwise.
pub fn gradient_check<F>(loss: F, params: &ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let root = loss(&mut tape)?;
        Ok(tape.value(root).item())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries_checked: 0 };
    if params.num_scalars() == 0 {
        return Ok(report);
    }

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::Nondeterministic { first, second });
    }

    let analytic = {
        let mut tape = Tape::new(params);
        let root = loss(&mut tape)?;
        tape.backward(root)?
    };

    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let grad = analytic.get(name).expect("gradient for every parameter");
        for k in 0..tensor.len() {
            let orig = tensor.data[k];
            probe.get_mut(name).unwrap().data[k] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data[k] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data[k] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = grad.data[k];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.clone(), k));
                }
            }
        }
    }
    Ok(report)
}
