//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value; [`Graph::backward`] walks the tape in reverse and
//! [`Graph::accumulate_param_grads`] folds leaf gradients back into the
//! [`ParamStore`].

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    AddTiled(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sigmoid(usize),
    Silu(usize),
    Tanh(usize),
    Square(usize),
    Softmax(usize),
    LayerNorm { x: usize, xhat: Vec<T>, inv_std: Vec<T> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    SumCols(usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

fn check_finite<T: Scalar>(t: &Tensor<T>, op: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite input to {op}")))
    }
}

#[inline]
fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    // keep the open interval (0, 1) representable at saturation
    s.max(T::min_positive_value()).min(T::one() - T::epsilon())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.cols()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let t = t.as_matrix_if_vector();
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf whose gradient can be read after `backward`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let t = t.as_matrix_if_vector();
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone().as_matrix_if_vector(), Op::Param, !p.frozen);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a.0, b.0), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(Error::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a.0, b.0), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), name, f)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if rv.len() != c {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.as_matrix();
        for r in 0..out.rows() {
            for (x, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a.0) || self.ng(row.0);
        Ok(self.push(out, Op::AddRow(a.0, row.0), ng))
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if rv.len() != c {
            return Err(Error::shape("mul_row", av.shape(), rv.shape()));
        }
        let mut out = av.as_matrix();
        for r in 0..out.rows() {
            for (x, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *x *= b;
            }
        }
        let ng = self.ng(a.0) || self.ng(row.0);
        Ok(self.push(out, Op::MulRow(a.0, row.0), ng))
    }

    /// Scales row `i` of `a` by `col[i]` (an `r×1` column broadcast over channels).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.len() != av.rows() {
            return Err(Error::shape("mul_col", av.shape(), cv.shape()));
        }
        let mut out = av.as_matrix();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let ng = self.ng(a.0) || self.ng(col.0);
        Ok(self.push(out, Op::MulCol(a.0, col.0), ng))
    }

    /// Adds `p` (`t×c`) to every consecutive block of `t` rows of `a`.
    pub fn add_tiled(&mut self, a: Var, p: Var) -> Result<Var> {
        let (av, pv) = (self.value(a), self.value(p));
        let t = pv.rows();
        if av.cols() != pv.cols() || t == 0 || av.rows() % t != 0 {
            return Err(Error::shape("add_tiled", av.shape(), pv.shape()));
        }
        let mut out = av.as_matrix();
        let blk = pv.len();
        for chunk in out.data_mut().chunks_mut(blk) {
            for (x, &b) in chunk.iter_mut().zip(pv.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a.0) || self.ng(p.0);
        Ok(self.push(out, Op::AddTiled(a.0, p.0), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a.0);
        self.push(out, Op::Scale(a.0, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(a.0);
        self.push(out, Op::AddScalar(a.0), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        check_finite(self.value(a), "sigmoid")?;
        let out = self.value(a).map(sigmoid_scalar);
        let ng = self.ng(a.0);
        Ok(self.push(out, Op::Sigmoid(a.0), ng))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        check_finite(self.value(a), "silu")?;
        let out = self.value(a).map(|x| x * sigmoid_scalar(x));
        let ng = self.ng(a.0);
        Ok(self.push(out, Op::Silu(a.0), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a.0);
        self.push(out, Op::Tanh(a.0), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(a.0);
        self.push(out, Op::Square(a.0), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        check_finite(av, "softmax")?;
        let mut out = av.as_matrix();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a.0);
        Ok(self.push(out, Op::Softmax(a.0), ng))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let av = self.value(a);
        check_finite(av, "layer_norm")?;
        let (rows, c) = (av.rows(), av.cols());
        let n = T::from_usize(c).unwrap();
        let mut xhat = Vec::with_capacity(av.len());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = av.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&x| (x - mean) * inv));
        }
        let out = Tensor::matrix(rows, c, xhat.clone())?;
        let ng = self.ng(a.0);
        Ok(self.push(out, Op::LayerNorm { x: a.0, xhat, inv_std }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.rows(p));
        let mut total = 0;
        for &p in parts {
            if self.rows(p) != rows {
                return Err(Error::shape("concat_cols", &[rows], self.shape(p)));
            }
            total += self.cols(p);
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let ng = self.ng(a.0);
        Ok(self.push(out, Op::SliceRows(a.0, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        if start + len > c {
            return Err(Error::shape("slice_cols", av.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(a.0);
        Ok(self.push(Tensor::matrix(rows, len, data)?, Op::SliceCols(a.0, start), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a.0);
        self.push(out, Op::Transpose(a.0), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshape(&[rows, cols])?;
        let ng = self.ng(a.0);
        Ok(self.push(out, Op::Reshape(a.0), ng))
    }

    /// Sum of all entries as a `1×1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a.0);
        self.push(Tensor::full(&[1, 1], s), Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Row sums as an `r×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data: Vec<T> = (0..av.rows()).map(|r| av.row(r).iter().copied().sum()).collect();
        let rows = data.len();
        let ng = self.ng(a.0);
        self.push(Tensor::matrix(rows, 1, data).expect("rows×1"), Op::SumCols(a.0), ng)
    }

    /// Reverse pass from a scalar (`1×1`) node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1, 1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |k: usize| &nodes[k].value;
        let want = |k: usize| nodes[k].needs_grad;
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if want(a) {
                    let mut d = vec![T::zero(); m * k];
                    gemm_nt(g.data(), bv.data(), &mut d, m, n, k);
                    accum(grads, a, Tensor::new(av.shape().to_vec(), d)?)?;
                }
                if want(b) {
                    let mut d = vec![T::zero(); k * n];
                    gemm_tn(av.data(), g.data(), &mut d, m, k, n);
                    accum(grads, b, Tensor::new(bv.shape().to_vec(), d)?)?;
                }
            }
            &Op::MatMulNT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if want(a) {
                    let mut d = vec![T::zero(); m * k];
                    gemm_nn(g.data(), bv.data(), &mut d, m, n, k);
                    accum(grads, a, Tensor::new(av.shape().to_vec(), d)?)?;
                }
                if want(b) {
                    let mut d = vec![T::zero(); n * k];
                    gemm_tn(g.data(), av.data(), &mut d, m, n, k);
                    accum(grads, b, Tensor::new(bv.shape().to_vec(), d)?)?;
                }
            }
            &Op::Add(a, b) => {
                if want(a) {
                    accum(grads, a, g.clone())?;
                }
                if want(b) {
                    accum(grads, b, g.clone())?;
                }
            }
            &Op::Sub(a, b) => {
                if want(a) {
                    accum(grads, a, g.clone())?;
                }
                if want(b) {
                    accum(grads, b, g.scale(-T::one()))?;
                }
            }
            &Op::Mul(a, b) => {
                if want(a) {
                    accum(grads, a, g.zip_map(val(b), "mul", |x, y| x * y)?)?;
                }
                if want(b) {
                    accum(grads, b, g.zip_map(val(a), "mul", |x, y| x * y)?)?;
                }
            }
            &Op::AddRow(a, row) => {
                if want(a) {
                    accum(grads, a, reshape_like(g.clone(), val(a))?)?;
                }
                if want(row) {
                    let c = g.cols();
                    let mut d = vec![T::zero(); c];
                    for r in 0..g.rows() {
                        for (s, &x) in d.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    accum(grads, row, Tensor::new(val(row).shape().to_vec(), d)?)?;
                }
            }
            &Op::MulRow(a, row) => {
                let (av, rv) = (val(a), val(row));
                if want(a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        for (x, &s) in d.row_mut(r).iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    accum(grads, a, reshape_like(d, av)?)?;
                }
                if want(row) {
                    let c = g.cols();
                    let am = av.as_matrix();
                    let mut d = vec![T::zero(); c];
                    for r in 0..g.rows() {
                        for ((s, &x), &y) in d.iter_mut().zip(g.row(r)).zip(am.row(r)) {
                            *s += x * y;
                        }
                    }
                    accum(grads, row, Tensor::new(rv.shape().to_vec(), d)?)?;
                }
            }
            &Op::MulCol(a, col) => {
                let (av, cv) = (val(a), val(col));
                if want(a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let s = cv.data()[r];
                        d.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    accum(grads, a, reshape_like(d, av)?)?;
                }
                if want(col) {
                    let am = av.as_matrix();
                    let d: Vec<T> = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(am.row(r)).map(|(&x, &y)| x * y).sum())
                        .collect();
                    accum(grads, col, Tensor::new(cv.shape().to_vec(), d)?)?;
                }
            }
            &Op::AddTiled(a, p) => {
                if want(a) {
                    accum(grads, a, reshape_like(g.clone(), val(a))?)?;
                }
                if want(p) {
                    let pv = val(p);
                    let mut d = vec![T::zero(); pv.len()];
                    for chunk in g.data().chunks(pv.len()) {
                        for (s, &x) in d.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    accum(grads, p, Tensor::new(pv.shape().to_vec(), d)?)?;
                }
            }
            &Op::Scale(a, s) => accum(grads, a, g.scale(s))?,
            &Op::AddScalar(a) => accum(grads, a, g.clone())?,
            &Op::Sigmoid(a) => {
                let d = g.zip_map(&nodes[i].value, "sigmoid", |gy, s| gy * s * (T::one() - s))?;
                accum(grads, a, d)?;
            }
            &Op::Silu(a) => {
                let d = g.zip_map(val(a), "silu", |gy, x| {
                    let s = sigmoid_scalar(x);
                    gy * s * (T::one() + x * (T::one() - s))
                })?;
                accum(grads, a, d)?;
            }
            &Op::Tanh(a) => {
                let d = g.zip_map(&nodes[i].value, "tanh", |gy, y| gy * (T::one() - y * y))?;
                accum(grads, a, d)?;
            }
            &Op::Square(a) => {
                let two = T::lit(2.0);
                let d = g.zip_map(val(a), "square", |gy, x| two * gy * x)?;
                accum(grads, a, d)?;
            }
            &Op::Softmax(a) => {
                let s = &nodes[i].value;
                let mut d = g.clone();
                for r in 0..s.rows() {
                    let dot: T = g.row(r).iter().zip(s.row(r)).map(|(&x, &y)| x * y).sum();
                    for (dx, &sy) in d.row_mut(r).iter_mut().zip(s.row(r)) {
                        *dx = sy * (*dx - dot);
                    }
                }
                accum(grads, a, reshape_like(d, val(a))?)?;
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let c = g.cols();
                let n = T::from_usize(c).unwrap();
                let mut d = vec![T::zero(); g.len()];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gy = g.row(r);
                    let xh = &xhat[r * c..(r + 1) * c];
                    let sum_g: T = gy.iter().copied().sum();
                    let sum_gx: T = gy.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = inv / n * (n * gy[j] - sum_g - xh[j] * sum_gx);
                    }
                }
                accum(grads, *x, Tensor::new(val(*x).shape().to_vec(), d)?)?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if want(p) {
                        let piece = g.slice_rows(start, rows)?;
                        accum(grads, p, reshape_like(piece, val(p))?)?;
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if want(p) {
                        let rows = g.rows();
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[start..start + w]);
                        }
                        accum(grads, p, Tensor::new(val(p).shape().to_vec(), d)?)?;
                    }
                    start += w;
                }
            }
            &Op::SliceRows(a, start) => {
                let av = val(a);
                let c = av.cols();
                let mut d = vec![T::zero(); av.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                accum(grads, a, Tensor::new(av.shape().to_vec(), d)?)?;
            }
            &Op::SliceCols(a, start) => {
                let av = val(a);
                let c = av.cols();
                let w = g.cols();
                let mut d = vec![T::zero(); av.len()];
                for r in 0..g.rows() {
                    d[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                accum(grads, a, Tensor::new(av.shape().to_vec(), d)?)?;
            }
            &Op::Transpose(a) => accum(grads, a, reshape_like(g.transpose(), val(a))?)?,
            &Op::Reshape(a) => accum(grads, a, reshape_like(g.clone(), val(a))?)?,
            &Op::Sum(a) => {
                let s = g.data()[0];
                accum(grads, a, Tensor::full(val(a).shape(), s))?;
            }
            &Op::SumCols(a) => {
                let av = val(a);
                let c = av.cols();
                let mut d = Vec::with_capacity(av.len());
                for &s in g.data() {
                    d.extend(std::iter::repeat(s).take(c));
                }
                accum(grads, a, Tensor::new(av.shape().to_vec(), d)?)?;
            }
        }
        Ok(())
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                let p = store.get_mut(id);
                let g = reshape_like(g.clone(), &p.grad)?;
                p.grad.add_assign(&g)?;
            }
        }
        Ok(())
    }
}

fn accum<T: Scalar>(grads: &mut [Option<Tensor<T>>], k: usize, d: Tensor<T>) -> Result<()> {
    match &mut grads[k] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => {
            *slot = Some(d);
            Ok(())
        }
    }
}

fn reshape_like<T: Scalar>(t: Tensor<T>, like: &Tensor<T>) -> Result<Tensor<T>> {
    if t.shape() == like.shape() {
        Ok(t)
    } else {
        t.reshape(like.shape())
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

impl<T: Scalar> Tensor<T> {
    fn as_matrix_if_vector(self) -> Self {
        if self.shape().len() >= 2 {
            self
        } else {
            let n = self.len();
            self.reshape(&[1, n]).expect("same length")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[rows, cols], v).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 1, &[0.0]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 4, &[-1000.0, -40.0, 40.0, 1000.0]));
        let y = g.sigmoid(x).unwrap();
        for &s in g.value(y).data() {
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn softmax_constant_row_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(2, 4, &[3.0; 8]));
        let y = g.softmax(x).unwrap();
        assert!(g.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn non_finite_rejected() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 2, &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x), Err(Error::Numeric(_))));
        assert!(matches!(g.sigmoid(x), Err(Error::Numeric(_))));
        assert!(matches!(g.layer_norm(x, 1e-9), Err(Error::Numeric(_))));
    }

    #[test]
    fn matmul_backward_simple() {
        let mut g = Graph::new();
        let a = g.input(t(1, 2, &[1.0, 2.0]));
        let b = g.input(t(2, 1, &[3.0, 4.0]));
        let y = g.matmul(a, b).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_leaf_gradients_accumulate() {
        let mut g = Graph::new();
        let x = g.input(t(1, 1, &[3.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
    }
}
