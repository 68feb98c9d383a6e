//! Dense row-major tensors and a record-and-replay reverse-mode tape.
//!
//! A [`Graph`] is built fresh for each forward pass. Every primitive appends
//! one node holding its output value and whatever it needs for the backward
//! rule; [`Graph::backward`] walks the nodes in reverse and accumulates
//! adjoints into the leaves that asked for gradients.

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = v);
        t
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(contract("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Interprets the tensor as a matrix whose columns are the last axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.split_last() {
            None => (1, 1),
            Some((&c, rest)) => (rest.iter().product(), c),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn with_shape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a fused primitive defined outside this module.
pub trait CustomBackward<S: Scalar> {
    /// Adjoints for each input given the adjoint of the output. `None` means
    /// the input receives no gradient.
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, out_grad: &[S]) -> Vec<Option<Vec<S>>>;
}

enum Op<S: Scalar> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Neg(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    AddRow(Var, Var),
    OuterAdd(Var, Var),
    LogSoftmax(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MaskFill {
        x: Var,
        allowed: Vec<bool>,
    },
    Dropout {
        x: Var,
        keep: Vec<S>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward<S>>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Computation record: nodes in creation (hence topological) order.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    leaf_grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn gauss_cdf<S: Scalar>(x: S) -> S {
    S::lit(0.5) * (S::one() + (x * S::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gauss_pdf<S: Scalar>(x: S) -> S {
    S::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (S::lit(-0.5) * x * x).exp()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<S: Scalar>(x: S) -> S {
    x * gauss_cdf(x)
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    gauss_cdf(x) + x * gauss_pdf(x)
}

// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every row-major index.
    unsafe {
        S::gemm_acc(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            c.as_mut_ptr(),
        )
    }
}

// c[m×n] += a[m×k] · b[n×k]^T
fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: as above, b read column-wise.
    unsafe {
        S::gemm_acc(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            c.as_mut_ptr(),
        )
    }
}

// c[k×n] += a[m×k]^T · b[m×n]
fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    // SAFETY: as above, a read column-wise.
    unsafe {
        S::gemm_acc(
            k,
            m,
            n,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            c.as_mut_ptr(),
        )
    }
}

fn accumulate<S: Scalar>(adj: &mut [Option<Vec<S>>], v: Var, contrib: Vec<S>) {
    match &mut adj[v.0] {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
        slot @ None => *slot = Some(contrib),
    }
}

fn softmax_row<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / sum);
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; gradients are collected for it iff `requires_grad`.
    pub fn leaf(&mut self, mut value: Tensor<S>, requires_grad: bool) -> Var {
        value.grad = None;
        value.requires_grad = requires_grad;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        };
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, S::tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, S::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > S::zero())) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, S::ln, Op::Log(a)))
    }

    /// `x[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "add_row")?;
        if self.shape(b) != [n] {
            return Err(shape_err("add_row", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for (v, &bb) in data[i * n..(i + 1) * n].iter_mut().zip(&bias) {
                *v = *v + bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(x, b), rg))
    }

    /// Row `i * n + j` of the result is `a[i] + b[j]` for `a: [m×k]`, `b: [n×k]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "outer_add")?;
        let (n, k2) = self.matrix(b, "outer_add")?;
        if k != k2 {
            return Err(shape_err("outer_add", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * n * k);
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bd[j * k..(j + 1) * k];
                data.extend(ar.iter().zip(br).map(|(&x, &y)| x + y));
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m * n, k], data)?, Op::OuterAdd(a, b), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (rows, cols) = src.rows_cols();
        if cols == 0 {
            return Err(contract("log_softmax over an empty axis"));
        }
        let mut data = Vec::with_capacity(src.len());
        for i in 0..rows {
            let r = src.row(i);
            let lse = crate::scalar::logsumexp(r);
            data.extend(r.iter().map(|&v| v - lse));
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax(x), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (rows, cols) = src.rows_cols();
        if cols == 0 {
            return Err(contract("softmax over an empty axis"));
        }
        let mut data = vec![S::zero(); src.len()];
        for i in 0..rows {
            softmax_row(src.row(i), &mut data[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = self.value(x).rows_cols();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = S::lit(LAYER_NORM_EPS);
        let dn = S::from_usize(d).unwrap();
        let (xs, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![S::zero(); rows * d];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * d];
        for i in 0..rows {
            let r = &xs[i * d..(i + 1) * d];
            let mean = r.iter().copied().sum::<S>() / dn;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (r[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix(x, "slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat of nothing"))?;
        let (m, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mi, ni) = self.matrix(p, "concat_cols")?;
            if mi != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![m, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Replaces entries whose `allowed` flag is false with `-inf`.
    pub fn mask_fill(&mut self, x: Var, allowed: Vec<bool>) -> Result<Var> {
        if allowed.len() != self.value(x).len() {
            return Err(shape_err("mask_fill", self.shape(x), &[allowed.len()]));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&allowed)
            .map(|(&v, &ok)| if ok { v } else { S::neg_infinity() })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaskFill { x, allowed }, rg))
    }

    /// Multiplies by a precomputed keep mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, keep: Vec<S>) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(shape_err("dropout", self.shape(x), &[keep.len()]));
        }
        let data = self.value(x).data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, keep }, rg))
    }

    /// Embedding lookup: rows of `table` selected by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, d) = self.matrix(table, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(contract(format!("row index {bad} out of range for {r} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], data)?,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<S>() / S::from_usize(v.len().max(1)).unwrap();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().with_shape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Records a fused primitive whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<S>, rule: Box<dyn CustomBackward<S>>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            let val = |v: Var| &self.nodes[v.0].value;
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    accumulate(&mut self.leaf_grads, Var(i), g);
                    continue;
                }
                &Op::MatMul(a, b) => {
                    let (m, k) = val(a).rows_cols();
                    let n = val(b).rows_cols().1;
                    if needs(a) {
                        let mut da = vec![S::zero(); m * k];
                        gemm_nt(m, n, k, &g, val(b).data(), &mut da);
                        accumulate(&mut adj, a, da);
                    }
                    if needs(b) {
                        let mut db = vec![S::zero(); k * n];
                        gemm_tn(m, k, n, val(a).data(), &g, &mut db);
                        accumulate(&mut adj, b, db);
                    }
                }
                &Op::MatMulNt(a, b) => {
                    let (m, k) = val(a).rows_cols();
                    let n = val(b).rows_cols().0;
                    if needs(a) {
                        let mut da = vec![S::zero(); m * k];
                        gemm_nn(m, n, k, &g, val(b).data(), &mut da);
                        accumulate(&mut adj, a, da);
                    }
                    if needs(b) {
                        let mut db = vec![S::zero(); n * k];
                        gemm_tn(m, n, k, &g, val(a).data(), &mut db);
                        accumulate(&mut adj, b, db);
                    }
                }
                &Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut adj, a, g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut adj, b, g);
                    }
                }
                &Op::Sub(a, b) => {
                    if needs(a) {
                        accumulate(&mut adj, a, g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut adj, b, g.iter().map(|&v| -v).collect());
                    }
                }
                &Op::Mul(a, b) => {
                    if needs(a) {
                        let d = g.iter().zip(val(b).data()).map(|(&gv, &bv)| gv * bv).collect();
                        accumulate(&mut adj, a, d);
                    }
                    if needs(b) {
                        let d = g.iter().zip(val(a).data()).map(|(&gv, &av)| gv * av).collect();
                        accumulate(&mut adj, b, d);
                    }
                }
                &Op::Scale(a, s) => accumulate(&mut adj, a, g.iter().map(|&v| v * s).collect()),
                &Op::Neg(a) => accumulate(&mut adj, a, g.iter().map(|&v| -v).collect()),
                &Op::Tanh(a) => {
                    let d = g
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * (S::one() - yv * yv))
                        .collect();
                    accumulate(&mut adj, a, d);
                }
                &Op::Gelu(a) => {
                    let d = g
                        .iter()
                        .zip(val(a).data())
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    accumulate(&mut adj, a, d);
                }
                &Op::Exp(a) => {
                    let d = g.iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect();
                    accumulate(&mut adj, a, d);
                }
                &Op::Log(a) => {
                    let d = g.iter().zip(val(a).data()).map(|(&gv, &xv)| gv / xv).collect();
                    accumulate(&mut adj, a, d);
                }
                &Op::AddRow(x, b) => {
                    if needs(b) {
                        let n = val(b).len();
                        let mut db = vec![S::zero(); n];
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                        }
                        accumulate(&mut adj, b, db);
                    }
                    if needs(x) {
                        accumulate(&mut adj, x, g);
                    }
                }
                &Op::OuterAdd(a, b) => {
                    let (m, k) = val(a).rows_cols();
                    let n = val(b).rows_cols().0;
                    let mut da = vec![S::zero(); m * k];
                    let mut db = vec![S::zero(); n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gr = &g[(i * n + j) * k..(i * n + j + 1) * k];
                            for p in 0..k {
                                da[i * k + p] = da[i * k + p] + gr[p];
                                db[j * k + p] = db[j * k + p] + gr[p];
                            }
                        }
                    }
                    if needs(a) {
                        accumulate(&mut adj, a, da);
                    }
                    if needs(b) {
                        accumulate(&mut adj, b, db);
                    }
                }
                &Op::LogSoftmax(x) => {
                    let (rows, cols) = y.rows_cols();
                    let mut d = vec![S::zero(); rows * cols];
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let yr = y.row(i);
                        let gs: S = gr.iter().copied().sum();
                        for j in 0..cols {
                            d[i * cols + j] = gr[j] - yr[j].exp() * gs;
                        }
                    }
                    accumulate(&mut adj, x, d);
                }
                &Op::Softmax(x) => {
                    let (rows, cols) = y.rows_cols();
                    let mut d = vec![S::zero(); rows * cols];
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let yr = y.row(i);
                        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            d[i * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut adj, x, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let d = val(gain).len();
                    let rows = inv_std.len();
                    let gv = val(gain).data();
                    if needs(gain) || needs(bias) {
                        let mut dg = vec![S::zero(); d];
                        let mut db = vec![S::zero(); d];
                        for i in 0..rows {
                            for j in 0..d {
                                dg[j] = dg[j] + g[i * d + j] * xhat[i * d + j];
                                db[j] = db[j] + g[i * d + j];
                            }
                        }
                        if needs(gain) {
                            accumulate(&mut adj, gain, dg);
                        }
                        if needs(bias) {
                            accumulate(&mut adj, bias, db);
                        }
                    }
                    if needs(x) {
                        let dn = S::from_usize(d).unwrap();
                        let mut dx = vec![S::zero(); rows * d];
                        for i in 0..rows {
                            let mut mean_g = S::zero();
                            let mut mean_gx = S::zero();
                            for j in 0..d {
                                let gh = g[i * d + j] * gv[j];
                                mean_g = mean_g + gh;
                                mean_gx = mean_gx + gh * xhat[i * d + j];
                            }
                            mean_g = mean_g / dn;
                            mean_gx = mean_gx / dn;
                            for j in 0..d {
                                let gh = g[i * d + j] * gv[j];
                                dx[i * d + j] = inv_std[i] * (gh - mean_g - xhat[i * d + j] * mean_gx);
                            }
                        }
                        accumulate(&mut adj, x, dx);
                    }
                }
                &Op::SliceCols { x, start } => {
                    let (m, n) = val(x).rows_cols();
                    let len = y.rows_cols().1;
                    let mut d = vec![S::zero(); m * n];
                    for i in 0..m {
                        d[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut adj, x, d);
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = y.rows_cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).rows_cols().1;
                        if needs(p) {
                            let mut d = Vec::with_capacity(m * w);
                            for i in 0..m {
                                d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                            }
                            accumulate(&mut adj, p, d);
                        }
                        offset += w;
                    }
                }
                Op::MaskFill { x, allowed } => {
                    let d = g
                        .iter()
                        .zip(allowed)
                        .map(|(&gv, &ok)| if ok { gv } else { S::zero() })
                        .collect();
                    accumulate(&mut adj, *x, d);
                }
                Op::Dropout { x, keep } => {
                    let d = g.iter().zip(keep).map(|(&gv, &k)| gv * k).collect();
                    accumulate(&mut adj, *x, d);
                }
                Op::GatherRows { table, idx } => {
                    let (r, d) = val(*table).rows_cols();
                    let mut dt = vec![S::zero(); r * d];
                    for (row, &ti) in idx.iter().enumerate() {
                        for j in 0..d {
                            dt[ti * d + j] = dt[ti * d + j] + g[row * d + j];
                        }
                    }
                    accumulate(&mut adj, *table, dt);
                }
                &Op::Sum(x) => accumulate(&mut adj, x, vec![g[0]; val(x).len()]),
                &Op::Mean(x) => {
                    let n = val(x).len();
                    let v = g[0] / S::from_usize(n.max(1)).unwrap();
                    accumulate(&mut adj, x, vec![v; n]);
                }
                &Op::Reshape(x) => accumulate(&mut adj, x, g),
                Op::Custom { inputs, rule } => {
                    let ins: Vec<&Tensor<S>> = inputs.iter().map(|&v| val(v)).collect();
                    let grads = rule.backward(&ins, y, &g);
                    for (&v, dv) in inputs.iter().zip(grads) {
                        if let Some(dv) = dv {
                            if needs(v) {
                                accumulate(&mut adj, v, dv);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let col = g.constant(t(&[2, 1], &[3., 4.]));
        let r = g.matmul(eye, col).unwrap();
        assert_eq!(g.value(r).data(), &[3., 4.]);
        let row = g.constant(t(&[1, 2], &[1., 2.]));
        let r = g.matmul(row, col).unwrap();
        assert_eq!(g.value(r).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_reports_both() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_small_cases() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[1], &[0.]));
        let th = g.tanh(z);
        let ge = g.gelu(z);
        assert_eq!(g.value(th).data(), &[0.]);
        assert_eq!(g.value(ge).data(), &[0.]);
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4., 6.]);
        let bad = g.constant(t(&[2], &[1., 0.]));
        assert!(matches!(g.log(bad), Err(Error::Domain { .. })));
    }

    #[test]
    fn log_softmax_cases() {
        let mut g = Graph::<f64>::new();
        let ln2 = 2f64.ln();
        for (inp, want) in [
            ([0.0, 0.0], [-ln2, -ln2]),
            ([1000.0, 1000.0], [-ln2, -ln2]),
            ([0.0, 3f64.ln()], [-(4f64.ln()), 3f64.ln() - 4f64.ln()]),
        ] {
            let x = g.constant(t(&[2], &inp));
            let y = g.log_softmax(x).unwrap();
            for (a, b) in g.value(y).data().iter().zip(want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(t(&[2], &[1., 1.]));
        let bias = g.constant(t(&[2], &[0., 0.]));
        let c = g.constant(t(&[2], &[3., 3.]));
        let y = g.layer_norm(c, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0.]);
        let x = g.constant(t(&[2], &[1., -1.]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        // variance 1, so the output is [1, -1] / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] - expect).abs() < 1e-15);
        assert!((g.value(y).data()[1] + expect).abs() < 1e-15);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1., -2., 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 1., 1.]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1., -2., 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., -4., 1.]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 2.]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn mask_fill_zeroes_attention_weight() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 3], &[0.3, -0.1, 2.0]));
        let m = g.mask_fill(x, vec![true, true, false]).unwrap();
        let p = g.softmax(m).unwrap();
        assert_eq!(g.value(p).data()[2], 0.0);
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap()[2], 0.0);
    }

    #[test]
    fn generic_over_f32() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::new(vec![1, 2], vec![0.5f32, -0.5]).unwrap());
        let y = g.gelu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let d = g.grad(x).unwrap();
        assert!((d[0] + d[1] - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn softmax_rows_normalize(xs in prop::collection::vec(-300.0f64..300.0, 1..12)) {
            let mut g = Graph::<f64>::new();
            let n = xs.len();
            let x = g.constant(Tensor::new(vec![1, n], xs).unwrap());
            let y = g.log_softmax(x).unwrap();
            let total: f64 = g.value(y).data().iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
