//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the nodes once, newest first, pushing gradients to the inputs of
//! each node. Parameters enter the tape through [`Tape::param`], which caches
//! one node per parameter so its gradient is collected in a single place.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a square-kernel 2-D convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }

    fn out_rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    ConstMatMul { c: Vec<T>, rows: usize, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, T),
    ScaleRows(Var, Vec<T>),
    MulConst(Var, Vec<T>),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Permute021 { x: Var, b: usize, p: usize, q: usize },
    LayerNorm { x: Var, inv_std: Vec<T> },
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    Pick(Var, Vec<usize>),
    MaxRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    SumGroups(Var, usize),
    SumRowGroups(Var, usize),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    PairScores { q: Var, k: Var, dummy: Var, n: usize, scale: T },
    MemberScores { q: Var, k: Var, members: Vec<(usize, Option<usize>)>, scale: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Enumerates strict-upper-triangle entries `(i, j)`, `i < j <= n`, of an
/// `(n+1) x (n+1)` matrix in row-major order; `j == n` is the dummy column.
pub fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..=n).map(move |j| (i, j)))
}

/// Number of strict-upper-triangle entries of an `(n+1) x (n+1)` matrix.
pub fn upper_pair_count(n: usize) -> usize {
    n * (n + 1) / 2
}

type Trainable<'p> = Box<dyn Fn(&str) -> bool + 'p>;

/// Recorded forward pass.
pub struct Tape<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    trainable: Option<Trainable<'p>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            trainable: None,
        }
    }

    /// Only parameters accepted by `filter` receive gradients; the rest are
    /// treated as constants, which skips their share of the backward pass.
    pub fn with_trainable(store: &'p ParamStore<T>, filter: impl Fn(&str) -> bool + 'p) -> Self {
        Tape {
            trainable: Some(Box::new(filter)),
            ..Tape::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
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

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::contract(format!(
                "expected a scalar, found shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param(id) => match &self.trainable {
                Some(f) => f(&self.store.get(id).name),
                None => true,
            },
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            1 => Ok((s[0], 1)),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::shape(format!("expected a matrix, found shape {s:?}"))),
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id), &[]);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            out.data_mut(),
            T::zero(),
        );
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `c @ x` for a constant `rows x m` matrix `c`.
    pub fn const_matmul(&mut self, c: Vec<T>, rows: usize, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if c.len() != rows * m {
            return Err(Error::shape(format!(
                "constant matrix of {} elements is not {rows}x{m}",
                c.len()
            )));
        }
        let mut out = Tensor::zeros(&[rows, n]);
        T::gemm(rows, m, n, &c, false, self.value(x).data(), false, out.data_mut(), T::zero());
        Ok(self.push(out, Op::ConstMatMul { c, rows, x }, &[x]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(va.shape(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::from_vec(va.shape(), va.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn row_operand(&self, x: Var, r: Var, what: &str) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(x)?;
        if self.value(r).len() != n {
            return Err(Error::shape(format!(
                "{what}: row vector of {} elements against {m}x{n}",
                self.value(r).len()
            )));
        }
        Ok((m, n))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.row_operand(x, bias, "add_row")?;
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[i % n];
        }
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Multiplies every row elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let (_, n) = self.row_operand(x, w, "mul_row")?;
        let g = self.value(w).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= g[i % n];
        }
        Ok(self.push(out, Op::MulRow(x, w), &[x, w]))
    }

    /// `a * x + b` with scalar constants.
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Var {
        let out = self.map(x, |v| a * v + b);
        self.push(out, Op::Affine(x, a), &[x])
    }

    pub fn scale(&mut self, x: Var, a: T) -> Var {
        let out = self.map(x, |v| a * v);
        self.push(out, Op::Affine(x, a), &[x])
    }

    /// Scales row `r` by the constant `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if w.len() != m {
            return Err(Error::shape(format!("scale_rows: {} weights for {m} rows", w.len())));
        }
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= w[i / n];
        }
        Ok(self.push(out, Op::ScaleRows(x, w), &[x]))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::shape("mul_const: size mismatch"));
        }
        let va = self.value(x);
        let data = va.data().iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::MulConst(x, c), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if let Some(&c) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::shape(format!("column {c} out of range for {n} columns")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * cols.len());
        for r in 0..m {
            data.extend(cols.iter().map(|&c| src[r * n + c]));
        }
        let out = Tensor::from_vec(&[m, cols.len()], data)?;
        Ok(self.push(out, Op::SelectCols(x, cols.to_vec()), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of nothing"));
        }
        let m = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(Error::shape(format!("concat: {pm} rows vs {m}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&[m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if let Some(&r) = idx.iter().find(|&&r| r >= m) {
            return Err(Error::shape(format!("row {r} out of range for {m} rows")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &r in idx {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let out = Tensor::from_vec(&[idx.len(), n], data)?;
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Reorders a `[b, p, q]` tensor to `[b, q, p]`.
    pub fn permute_021(&mut self, x: Var, b: usize, p: usize, q: usize) -> Result<Var> {
        if self.value(x).len() != b * p * q {
            return Err(Error::shape("permute_021: size mismatch"));
        }
        let src = self.value(x).data();
        let mut data = vec![T::zero(); b * p * q];
        for bi in 0..b {
            for pi in 0..p {
                for qi in 0..q {
                    data[(bi * q + qi) * p + pi] = src[(bi * p + pi) * q + qi];
                }
            }
        }
        let out = Tensor::from_vec(&[b, q, p], data)?;
        Ok(self.push(out, Op::Permute021 { x, b, p, q }, &[x]))
    }

    /// Row-wise standardization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let eps = T::lit(eps);
        let nf = T::lit(n as f64);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); m * n];
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for c in 0..n {
                data[r * n + c] = (row[c] - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push(out, Op::LayerNorm { x, inv_std }, &[x]))
    }

    /// Row-wise log-softmax; `-inf` entries are treated as masked out.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for c in 0..n {
                data[r * n + c] = row[c] - lse;
            }
        }
        let out = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push(out, Op::LogSoftmaxRows(x), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z = row.iter().map(|&v| (v - mx).exp()).sum::<T>();
            for c in 0..n {
                data[r * n + c] = (row[c] - mx).exp() / z;
            }
        }
        let out = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Picks `x[r, idx[r]]` for every row.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if idx.len() != m || idx.iter().any(|&c| c >= n) {
            return Err(Error::shape("pick: bad indices"));
        }
        let src = self.value(x).data();
        let data = idx.iter().enumerate().map(|(r, &c)| src[r * n + c]).collect();
        let out = Tensor::from_vec(&[m], data)?;
        Ok(self.push(out, Op::Pick(x, idx.to_vec()), &[x]))
    }

    /// Row maxima; the gradient flows to the first maximal entry.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut arg = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m);
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mut best = 0;
            for c in 1..n {
                if row[c] > row[best] {
                    best = c;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        let out = Tensor::from_vec(&[m], data)?;
        Ok(self.push(out, Op::MaxRows(x, arg), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Sums every element of each consecutive block of `group` rows.
    pub fn sum_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if group == 0 || m % group != 0 {
            return Err(Error::shape(format!("{m} rows not divisible into groups of {group}")));
        }
        let src = self.value(x).data();
        let data = src.chunks(group * n).map(|c| c.iter().copied().sum::<T>()).collect();
        let out = Tensor::from_vec(&[m / group], data)?;
        Ok(self.push(out, Op::SumGroups(x, group), &[x]))
    }

    /// Sums each consecutive block of `group` rows: `[m, n]` to `[m / group, n]`.
    pub fn sum_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if group == 0 || m % group != 0 {
            return Err(Error::shape(format!("{m} rows not divisible into groups of {group}")));
        }
        let src = self.value(x).data();
        let mut data = vec![T::zero(); (m / group) * n];
        for r in 0..m {
            axpy(&mut data[(r / group) * n..(r / group + 1) * n], &src[r * n..(r + 1) * n], T::one());
        }
        let out = Tensor::from_vec(&[m / group, n], data)?;
        Ok(self.push(out, Op::SumRowGroups(x, group), &[x]))
    }

    /// Convolution over NHWC input `x` with weights `w: [out_ch, k*k*in_ch]`
    /// (patch order row, column, channel) and bias `b: [out_ch]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("conv2d expects [B,H,W,C], got {s:?}")));
        }
        let (out_ch, patch) = self.dims2(w)?;
        let geom = ConvGeom {
            batch: s[0],
            height: s[1],
            width: s[2],
            in_ch: s[3],
            out_ch,
            kernel,
            stride,
            pad,
        };
        if patch != geom.patch() || self.value(b).len() != out_ch {
            return Err(Error::shape(format!(
                "conv2d weights {out_ch}x{patch} do not match kernel {kernel} over {} channels",
                geom.in_ch
            )));
        }
        if geom.height + 2 * pad < kernel || geom.width + 2 * pad < kernel || stride == 0 {
            return Err(Error::shape("conv2d kernel larger than input"));
        }
        let cols = im2col(self.value(x).data(), &geom);
        let rows = geom.out_rows();
        let mut out = Tensor::zeros(&[geom.batch, geom.out_height(), geom.out_width(), out_ch]);
        let bias = self.value(b).data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = bias[i % out_ch];
        }
        T::gemm(
            rows,
            patch,
            out_ch,
            &cols,
            false,
            self.value(w).data(),
            true,
            out.data_mut(),
            T::one(),
        );
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b]))
    }

    /// Scores of the strict upper triangle of `[q; *] [k; dummy]^T * scale`.
    ///
    /// `q`, `k` hold `n` consecutive rows per sample; `dummy` is the extra
    /// key row paired with every object. Output is `[samples, n(n+1)/2]`,
    /// entries ordered as [`upper_pairs`].
    pub fn pair_scores(&mut self, q: Var, k: Var, dummy: Var, n: usize, scale: T) -> Result<Var> {
        let (rows, d) = self.dims2(q)?;
        if self.shape(k) != self.shape(q) || self.value(dummy).len() != d || n == 0 || rows % n != 0 {
            return Err(Error::shape("pair_scores: inconsistent operands"));
        }
        let samples = rows / n;
        let p = upper_pair_count(n);
        let (qv, kv, dv) = (self.value(q).data(), self.value(k).data(), self.value(dummy).data());
        let mut data = Vec::with_capacity(samples * p);
        for s in 0..samples {
            for (i, j) in upper_pairs(n) {
                let qi = &qv[(s * n + i) * d..(s * n + i + 1) * d];
                let kj = if j == n { dv } else { &kv[(s * n + j) * d..(s * n + j + 1) * d] };
                data.push(dot(qi, kj) * scale);
            }
        }
        let out = Tensor::from_vec(&[samples, p], data)?;
        Ok(self.push(out, Op::PairScores { q, k, dummy, n, scale }, &[q, k, dummy]))
    }

    /// Scores `q[f] . k[member] * scale` for the (one or two) members of each
    /// row `f`; an absent second member yields `-inf`.
    pub fn member_scores(&mut self, q: Var, k: Var, members: &[(usize, Option<usize>)], scale: T) -> Result<Var> {
        let (fq, d) = self.dims2(q)?;
        let (rk, dk) = self.dims2(k)?;
        if d != dk || members.len() != fq {
            return Err(Error::shape("member_scores: inconsistent operands"));
        }
        if members.iter().any(|&(a, b)| a >= rk || b.is_some_and(|b| b >= rk)) {
            return Err(Error::shape("member_scores: member row out of range"));
        }
        let (qv, kv) = (self.value(q).data(), self.value(k).data());
        let mut data = Vec::with_capacity(fq * 2);
        for (f, &(a, b)) in members.iter().enumerate() {
            let qf = &qv[f * d..(f + 1) * d];
            data.push(dot(qf, &kv[a * d..(a + 1) * d]) * scale);
            data.push(match b {
                Some(b) => dot(qf, &kv[b * d..(b + 1) * d]) * scale,
                None => T::neg_infinity(),
            });
        }
        let out = Tensor::from_vec(&[fq, 2], data)?;
        Ok(self.push(
            out,
            Op::MemberScores { q, k, members: members.to_vec(), scale },
            &[q, k],
        ))
    }

    /// Runs the backward pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "loss must be scalar, found shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out: Vec<Option<Tensor<T>>> = (0..self.store.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop(node, g, &mut grads, &mut out)?;
        }
        Ok(Gradients { slots: out })
    }

    fn backprop(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        macro_rules! buf {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                out[id.0] = Some(Tensor::from_vec(node.value.shape(), g)?);
            }
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a)?;
                let n = self.dims2(b)?.1;
                if want(a) {
                    T::gemm(m, n, k, &g, false, val(b), true, buf!(a), T::one());
                }
                if want(b) {
                    T::gemm(k, m, n, val(a), true, &g, false, buf!(b), T::one());
                }
            }
            Op::ConstMatMul { c, rows, x } => {
                let (m, n) = self.dims2(*x)?;
                if want(*x) {
                    T::gemm(m, *rows, n, c, true, &g, false, buf!(*x), T::one());
                }
            }
            &Op::Add(a, b) => {
                if want(a) {
                    axpy(buf!(a), &g, T::one());
                }
                if want(b) {
                    axpy(buf!(b), &g, T::one());
                }
            }
            &Op::Sub(a, b) => {
                if want(a) {
                    axpy(buf!(a), &g, T::one());
                }
                if want(b) {
                    axpy(buf!(b), &g, -T::one());
                }
            }
            &Op::Mul(a, b) => {
                if want(a) {
                    let gb = buf!(a);
                    for ((d, &gi), &bi) in gb.iter_mut().zip(&g).zip(val(b)) {
                        *d += gi * bi;
                    }
                }
                if want(b) {
                    let gb = buf!(b);
                    for ((d, &gi), &ai) in gb.iter_mut().zip(&g).zip(val(a)) {
                        *d += gi * ai;
                    }
                }
            }
            &Op::AddRow(x, bias) => {
                let n = val(bias).len();
                if want(x) {
                    axpy(buf!(x), &g, T::one());
                }
                if want(bias) {
                    let gb = buf!(bias);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                }
            }
            &Op::MulRow(x, w) => {
                let n = val(w).len();
                if want(x) {
                    let wv = val(w);
                    let gx = buf!(x);
                    for (i, &gi) in g.iter().enumerate() {
                        gx[i] += gi * wv[i % n];
                    }
                }
                if want(w) {
                    let xv = val(x);
                    let gw = buf!(w);
                    for (i, &gi) in g.iter().enumerate() {
                        gw[i % n] += gi * xv[i];
                    }
                }
            }
            &Op::Affine(x, a) => {
                if want(x) {
                    axpy(buf!(x), &g, a);
                }
            }
            Op::ScaleRows(x, w) => {
                if want(*x) {
                    let n = self.dims2(*x)?.1;
                    let gx = buf!(*x);
                    for (i, &gi) in g.iter().enumerate() {
                        gx[i] += gi * w[i / n];
                    }
                }
            }
            Op::MulConst(x, c) => {
                if want(*x) {
                    let gx = buf!(*x);
                    for ((d, &gi), &ci) in gx.iter_mut().zip(&g).zip(c) {
                        *d += gi * ci;
                    }
                }
            }
            &Op::Relu(x) => {
                if want(x) {
                    let gx = buf!(x);
                    for ((d, &gi), &y) in gx.iter_mut().zip(&g).zip(node.value.data()) {
                        if y > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if want(x) {
                    let gx = buf!(x);
                    for ((d, &gi), &y) in gx.iter_mut().zip(&g).zip(node.value.data()) {
                        *d += gi * y * (T::one() - y);
                    }
                }
            }
            &Op::Abs(x) => {
                if want(x) {
                    let xv = val(x);
                    let gx = buf!(x);
                    for ((d, &gi), &xi) in gx.iter_mut().zip(&g).zip(xv) {
                        if xi > T::zero() {
                            *d += gi;
                        } else if xi < T::zero() {
                            *d -= gi;
                        }
                    }
                }
            }
            Op::SelectCols(x, cols) => {
                if want(*x) {
                    let n = self.dims2(*x)?.1;
                    let w = cols.len();
                    let gx = buf!(*x);
                    for (i, &gi) in g.iter().enumerate() {
                        gx[(i / w) * n + cols[i % w]] += gi;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims2(p)?.1;
                    if want(p) {
                        let gp = buf!(p);
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            for (c, d) in row.iter_mut().enumerate() {
                                *d += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows(x, idx) => {
                if want(*x) {
                    let n = self.dims2(*x)?.1;
                    let gx = buf!(*x);
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut gx[src * n..(src + 1) * n], &g[r * n..(r + 1) * n], T::one());
                    }
                }
            }
            &Op::Reshape(x) => {
                if want(x) {
                    axpy(buf!(x), &g, T::one());
                }
            }
            &Op::Permute021 { x, b, p, q } => {
                if want(x) {
                    let gx = buf!(x);
                    for bi in 0..b {
                        for pi in 0..p {
                            for qi in 0..q {
                                gx[(bi * p + pi) * q + qi] += g[(bi * q + qi) * p + pi];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if want(*x) {
                    let n = self.dims2(*x)?.1;
                    let nf = T::lit(n as f64);
                    let y = node.value.data();
                    let gx = buf!(*x);
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let mg = gr.iter().copied().sum::<T>() / nf;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for c in 0..n {
                            gx[r * n + c] += is * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows(x) => {
                if want(x) {
                    let n = self.dims2(x)?.1;
                    let y = node.value.data();
                    let gx = buf!(x);
                    for (r, gr) in g.chunks(n).enumerate() {
                        let s = gr.iter().copied().sum::<T>();
                        for c in 0..n {
                            gx[r * n + c] += gr[c] - y[r * n + c].exp() * s;
                        }
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                if want(x) {
                    let n = self.dims2(x)?.1;
                    let y = node.value.data();
                    let gx = buf!(x);
                    for (r, gr) in g.chunks(n).enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let s = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                        for c in 0..n {
                            gx[r * n + c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::Pick(x, idx) | Op::MaxRows(x, idx) => {
                if want(*x) {
                    let n = self.dims2(*x)?.1;
                    let gx = buf!(*x);
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * n + c] += g[r];
                    }
                }
            }
            &Op::SumAll(x) => {
                if want(x) {
                    buf!(x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::MeanAll(x) => {
                if want(x) {
                    let gx = buf!(x);
                    let s = g[0] / T::lit(gx.len().max(1) as f64);
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            &Op::SumGroups(x, group) => {
                if want(x) {
                    let n = self.dims2(x)?.1;
                    let gx = buf!(x);
                    for (i, d) in gx.iter_mut().enumerate() {
                        *d += g[i / (group * n)];
                    }
                }
            }
            &Op::SumRowGroups(x, group) => {
                if want(x) {
                    let n = self.dims2(x)?.1;
                    let gx = buf!(x);
                    for (r, row) in gx.chunks_mut(n).enumerate() {
                        axpy(row, &g[(r / group) * n..(r / group + 1) * n], T::one());
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.out_rows();
                let patch = geom.patch();
                let co = geom.out_ch;
                if want(*w) {
                    T::gemm(co, rows, patch, &g, true, cols, false, buf!(*w), T::one());
                }
                if want(*b) {
                    let gb = buf!(*b);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % co] += gi;
                    }
                }
                if want(*x) {
                    let mut gcols = vec![T::zero(); rows * patch];
                    T::gemm(rows, co, patch, &g, false, val(*w), false, &mut gcols, T::zero());
                    col2im_add(&gcols, geom, buf!(*x));
                }
            }
            &Op::PairScores { q, k, dummy, n, scale } => {
                let d = self.dims2(q)?.1;
                let samples = self.dims2(q)?.0 / n;
                let p = upper_pair_count(n);
                let (qv, kv, dv) = (val(q), val(k), val(dummy));
                if want(q) {
                    let gq = buf!(q);
                    for s in 0..samples {
                        for (e, (i, j)) in upper_pairs(n).enumerate() {
                            let c = g[s * p + e] * scale;
                            let kj = if j == n { dv } else { &kv[(s * n + j) * d..(s * n + j + 1) * d] };
                            axpy(&mut gq[(s * n + i) * d..(s * n + i + 1) * d], kj, c);
                        }
                    }
                }
                if want(k) {
                    let gk = buf!(k);
                    for s in 0..samples {
                        for (e, (i, j)) in upper_pairs(n).enumerate() {
                            if j < n {
                                let c = g[s * p + e] * scale;
                                let qi = &qv[(s * n + i) * d..(s * n + i + 1) * d];
                                axpy(&mut gk[(s * n + j) * d..(s * n + j + 1) * d], qi, c);
                            }
                        }
                    }
                }
                if want(dummy) {
                    let gd = buf!(dummy);
                    for s in 0..samples {
                        for (e, (i, j)) in upper_pairs(n).enumerate() {
                            if j == n {
                                let c = g[s * p + e] * scale;
                                axpy(gd, &qv[(s * n + i) * d..(s * n + i + 1) * d], c);
                            }
                        }
                    }
                }
            }
            Op::MemberScores { q, k, members, scale } => {
                let d = self.dims2(*q)?.1;
                let (qv, kv) = (val(*q), val(*k));
                let rowpairs = |f: usize| {
                    let (a, b) = members[f];
                    [Some(a), b]
                };
                if want(*q) {
                    let gq = buf!(*q);
                    for f in 0..members.len() {
                        for (slot, r) in rowpairs(f).into_iter().enumerate() {
                            if let Some(r) = r {
                                let c = g[f * 2 + slot] * *scale;
                                axpy(&mut gq[f * d..(f + 1) * d], &kv[r * d..(r + 1) * d], c);
                            }
                        }
                    }
                }
                if want(*k) {
                    let gk = buf!(*k);
                    for f in 0..members.len() {
                        for (slot, r) in rowpairs(f).into_iter().enumerate() {
                            if let Some(r) = r {
                                let c = g[f * 2 + slot] * *scale;
                                axpy(&mut gk[r * d..(r + 1) * d], &qv[f * d..(f + 1) * d], c);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'g mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn axpy<T: Real>(y: &mut [T], x: &[T], a: T) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d += a * s;
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo, k, c) = (g.out_height(), g.out_width(), g.kernel, g.in_ch);
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.out_rows() * patch];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let (ho, wo, k, c) = (g.out_height(), g.out_width(), g.kernel, g.in_ch);
    let patch = g.patch();
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        axpy(&mut gx[dst..dst + c], &cols[src..src + c], T::one());
                    }
                }
            }
        }
    }
}

/// Evaluates `f` on a fresh tape, writes the gradients into the store's
/// slots and returns the loss value.
pub fn grad<T, F>(store: &mut ParamStore<T>, f: F) -> Result<T>
where
    T: Real,
    F: for<'a> FnOnce(&mut Tape<'a, T>) -> Result<Var>,
{
    let (value, grads) = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        let value = tape.scalar(loss)?;
        (value, tape.backward(loss)?)
    };
    store.set_grads(grads);
    Ok(value)
}

/// [`grad`] restricted to the parameters accepted by `filter`; the others
/// keep zero gradients.
pub fn grad_filtered<T, F>(store: &mut ParamStore<T>, filter: fn(&str) -> bool, f: F) -> Result<T>
where
    T: Real,
    F: for<'a> FnOnce(&mut Tape<'a, T>) -> Result<Var>,
{
    let (value, grads) = {
        let mut tape = Tape::with_trainable(store, filter);
        let loss = f(&mut tape)?;
        let value = tape.scalar(loss)?;
        (value, tape.backward(loss)?)
    };
    store.set_grads(grads);
    Ok(value)
}
