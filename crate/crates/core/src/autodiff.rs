//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive executed on it in topological order.
//! Frozen weights enter as borrowed constants and never receive gradients;
//! trainable parameters enter through [`Graph::param`]. [`Graph::backward`]
//! consumes the tape.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::real::Real;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Identifies a parameter inside a [`crate::param::ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamRef {
    pub set: u32,
    pub index: u32,
}

enum Op<T> {
    Leaf(Option<ParamRef>),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<T>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    InfoNce {
        sim: Var,
        tau: T,
        weights: Vec<T>,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. Values of constants and parameters are borrowed for `'a`.
pub struct Graph<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match t {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::InvalidShape {
            op,
            msg: format!("expected a matrix, got shape {t:?}"),
        }),
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0]
    }

    /// First element of a node, for scalar losses.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Frozen value; never receives a gradient.
    pub fn constant(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf(None), false)
    }

    pub fn constant_owned(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf(None), false)
    }

    /// Free-standing leaf; its gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf(None), requires_grad)
    }

    /// Trainable parameter; its gradient is reported by [`Gradients::param`].
    pub fn param(&mut self, r: ParamRef, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf(Some(r)), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push_owned(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul_nt", self.shape(a))?;
        let (n, k2) = matrix_dims("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push_owned(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_owned(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    /// Broadcast-adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(b).numel() != n {
            return Err(mismatch("add_row", self.shape(a), self.shape(b)));
        }
        let bias = self.data(b);
        let out: Vec<T> = self
            .data(a)
            .chunks(n)
            .flat_map(|r| r.iter().zip(bias).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_owned(Tensor::from_parts(shape, out), Op::AddRow(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_owned(Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push_owned(Tensor::from_parts(shape, out), Op::Scale(a, s), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_owned(Tensor::from_parts(shape, out), Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.push_owned(Tensor::from_parts(shape, out), Op::Softmax(a), &[a])
    }

    /// Row `i` of a square score matrix is normalized over columns `0..=i`;
    /// later columns are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("causal_softmax", self.shape(a))?;
        if m != n {
            return Err(mismatch("causal_softmax", &[m], &[n]));
        }
        let mut out = self.data(a).to_vec();
        for (i, row) in out.chunks_mut(n).enumerate() {
            kernels::softmax_in_place(&mut row[..=i]);
            for x in &mut row[i + 1..] {
                *x = T::zero();
            }
        }
        Ok(self.push_owned(Tensor::from_parts(vec![m, n], out), Op::CausalSoftmax(a), &[a]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let nf = T::from_f64(n as f64);
        let xs = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(xs.len() / n);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_owned(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Embedding lookup: rows `ids` of `table` stacked into `[ids.len(), n]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, n) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                msg: "no rows requested".into(),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::InvalidShape {
                    op: "gather_rows",
                    msg: format!("row {id} out of range for table of shape {:?}", t.shape()),
                });
            }
            out.extend_from_slice(t.row(id));
        }
        Ok(self.push_owned(
            Tensor::from_parts(vec![ids.len(), n], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Concatenation along the sequence (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(mismatch("concat_rows", self.shape(parts[0]), t.shape()));
            }
            m += t.rows();
            out.extend_from_slice(t.data());
        }
        Ok(self.push_owned(Tensor::from_parts(vec![m, n], out), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(mismatch("concat_cols", self.shape(parts[0]), t.shape()));
            }
            widths.push(t.cols());
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push_owned(Tensor::from_parts(vec![m, n], out), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if len == 0 || start + len > m {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for shape {:?}", start + len, t.shape()),
            });
        }
        let out = t.data()[start * n..(start + len) * n].to_vec();
        Ok(self.push_owned(Tensor::from_parts(vec![len, n], out), Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if len == 0 || start + len > n {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for shape {:?}", start + len, t.shape()),
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        Ok(self.push_owned(Tensor::from_parts(vec![m, len], out), Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push_owned(t, Op::Reshape(x), &[x]))
    }

    /// Mean over the row axis: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![T::zero(); n];
        for row in t.data().chunks(n) {
            kernels::axpy(T::one(), row, &mut out);
        }
        let inv = T::one() / T::from_f64(m as f64);
        for v in &mut out {
            *v *= inv;
        }
        self.push_owned(Tensor::from_parts(vec![1, n], out), Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push_owned(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum over `(row, class)` pairs of `-log softmax(logits[row])[class]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(logits);
        let (m, v) = matrix_dims("cross_entropy", t.shape())?;
        if targets.is_empty() {
            return Err(Error::EmptyMask("cross_entropy"));
        }
        let mut total = T::zero();
        let mut probs = Vec::with_capacity(targets.len() * v);
        for &(row, class) in targets {
            if row >= m || class >= v {
                return Err(Error::InvalidShape {
                    op: "cross_entropy",
                    msg: format!("target ({row}, {class}) out of range for logits {:?}", t.shape()),
                });
            }
            let r = t.row(row);
            total += kernels::log_sum_exp(r) - r[class];
            let start = probs.len();
            probs.extend_from_slice(r);
            kernels::softmax_in_place(&mut probs[start..]);
        }
        Ok(self.push_owned(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let eps = T::from_f64(NORM_EPS);
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let norm = kernels::dot(row, row).sqrt().max(eps);
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let shape = t.shape().to_vec();
        self.push_owned(Tensor::from_parts(shape, out), Op::NormalizeRows { x, norms }, &[x])
    }

    /// InfoNCE over a square similarity matrix whose row `i` compares anchor
    /// `i` against every candidate `j`; the positive is the diagonal. Returns
    /// the batch mean of `-sim[i,i]/tau + logsumexp_{j in D_i}(sim[i,j]/tau)`
    /// where `D_i` excludes `i` unless `include_positive` is set.
    pub fn info_nce(&mut self, sim: Var, tau: T, include_positive: bool) -> Result<Var> {
        let (b, b2) = matrix_dims("info_nce", self.shape(sim))?;
        if b != b2 {
            return Err(mismatch("info_nce", &[b], &[b2]));
        }
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let s = self.data(sim);
        let mut weights = vec![T::zero(); b * b];
        let mut total = T::zero();
        for i in 0..b {
            let row = &s[i * b..(i + 1) * b];
            let w = &mut weights[i * b..(i + 1) * b];
            let mut max = T::neg_infinity();
            for j in 0..b {
                if j != i || include_positive {
                    max = max.max(row[j] / tau);
                }
            }
            let mut z = T::zero();
            for j in 0..b {
                if j != i || include_positive {
                    w[j] = (row[j] / tau - max).exp();
                    z += w[j];
                }
            }
            for x in w.iter_mut() {
                *x /= z;
            }
            total += max + z.ln() - row[i] / tau;
        }
        let loss = total / T::from_f64(b as f64);
        Ok(self.push_owned(
            Tensor::scalar(loss),
            Op::InfoNce { sim, tau, weights },
            &[sim],
        ))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut out = Gradients {
            leaves: BTreeMap::new(),
            params: BTreeMap::new(),
        };
        if !nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let mut send = |v: Var, f: &mut dyn FnMut(&mut [T])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
                f(slot);
            };
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf(p) => {
                    let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                    match p {
                        Some(r) => match out.params.get_mut(r) {
                            // a parameter may enter the graph through several leaves
                            Some(acc) => acc.add_assign(&t),
                            None => {
                                out.params.insert(*r, t);
                            }
                        },
                        None => {
                            out.leaves.insert(idx, t);
                        }
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                    let n = nodes[b.0].value.cols();
                    send(*a, &mut |da| kernels::matmul_nt_acc(&g, val(*b), da, m, n, k));
                    send(*b, &mut |db| kernels::matmul_tn_acc(val(*a), &g, db, m, k, n));
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                    let n = nodes[b.0].value.rows();
                    send(*a, &mut |da| kernels::matmul_acc(&g, val(*b), da, m, n, k));
                    send(*b, &mut |db| kernels::matmul_tn_acc(&g, val(*a), db, m, n, k));
                }
                Op::Add(a, b) => {
                    send(*a, &mut |da| kernels::axpy(T::one(), &g, da));
                    send(*b, &mut |db| kernels::axpy(T::one(), &g, db));
                }
                Op::AddRow(a, b) => {
                    send(*a, &mut |da| kernels::axpy(T::one(), &g, da));
                    send(*b, &mut |db| {
                        let n = db.len();
                        for row in g.chunks(n) {
                            kernels::axpy(T::one(), row, db);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    send(*a, &mut |da| {
                        for ((d, &gi), &bi) in da.iter_mut().zip(&g).zip(val(*b)) {
                            *d += gi * bi;
                        }
                    });
                    send(*b, &mut |db| {
                        for ((d, &gi), &ai) in db.iter_mut().zip(&g).zip(val(*a)) {
                            *d += gi * ai;
                        }
                    });
                }
                Op::Scale(a, s) => send(*a, &mut |da| kernels::axpy(*s, &g, da)),
                Op::Gelu(a) => send(*a, &mut |da| {
                    for ((d, &gi), &x) in da.iter_mut().zip(&g).zip(val(*a)) {
                        *d += gi * gelu_grad(x);
                    }
                }),
                Op::Softmax(a) | Op::CausalSoftmax(a) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    send(*a, &mut |da| {
                        for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                            let s = kernels::dot(gr, yr);
                            for j in 0..n {
                                dr[j] += yr[j] * (gr[j] - s);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let n = node.value.cols();
                    let gm = val(*gamma);
                    send(*gamma, &mut |dg| {
                        for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                    });
                    send(*beta, &mut |db| {
                        for gr in g.chunks(n) {
                            kernels::axpy(T::one(), gr, db);
                        }
                    });
                    send(*x, &mut |dx| {
                        let nf = T::from_f64(n as f64);
                        let mut dh = vec![T::zero(); n];
                        for (i, (dr, gr)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                            let hr = &xhat[i * n..(i + 1) * n];
                            for j in 0..n {
                                dh[j] = gr[j] * gm[j];
                            }
                            let mean_dh = dh.iter().copied().sum::<T>() / nf;
                            let mean_dh_h = kernels::dot(&dh, hr) / nf;
                            for j in 0..n {
                                dr[j] += rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                }
                Op::Gather { table, ids } => {
                    let n = node.value.cols();
                    send(*table, &mut |dt| {
                        for (k, &id) in ids.iter().enumerate() {
                            kernels::axpy(T::one(), &g[k * n..(k + 1) * n], &mut dt[id * n..(id + 1) * n]);
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.numel();
                        send(p, &mut |dp| kernels::axpy(T::one(), &g[offset..offset + len], dp));
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.cols();
                    let mut col = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.cols();
                        send(p, &mut |dp| {
                            for (dr, gr) in dp.chunks_mut(w).zip(g.chunks(n)) {
                                kernels::axpy(T::one(), &gr[col..col + w], dr);
                            }
                        });
                        col += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let n = node.value.cols();
                    send(*x, &mut |dx| {
                        kernels::axpy(T::one(), &g, &mut dx[start * n..start * n + g.len()]);
                    });
                }
                Op::SliceCols { x, start } => {
                    let w = node.value.cols();
                    let n = nodes[x.0].value.cols();
                    send(*x, &mut |dx| {
                        for (dr, gr) in dx.chunks_mut(n).zip(g.chunks(w)) {
                            kernels::axpy(T::one(), gr, &mut dr[*start..start + w]);
                        }
                    });
                }
                Op::Reshape(x) => send(*x, &mut |dx| kernels::axpy(T::one(), &g, dx)),
                Op::MeanRows(x) => {
                    let m = nodes[x.0].value.rows();
                    let inv = T::one() / T::from_f64(m as f64);
                    send(*x, &mut |dx| {
                        for dr in dx.chunks_mut(g.len()) {
                            kernels::axpy(inv, &g, dr);
                        }
                    });
                }
                Op::Sum(x) => send(*x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }),
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let v = nodes[logits.0].value.cols();
                    send(*logits, &mut |dl| {
                        for (k, &(row, class)) in targets.iter().enumerate() {
                            let p = &probs[k * v..(k + 1) * v];
                            let dr = &mut dl[row * v..(row + 1) * v];
                            kernels::axpy(g[0], p, dr);
                            dr[class] -= g[0];
                        }
                    });
                }
                Op::NormalizeRows { x, norms } => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    send(*x, &mut |dx| {
                        for (i, dr) in dx.chunks_mut(n).enumerate() {
                            let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                            let s = kernels::dot(yr, gr);
                            for j in 0..n {
                                dr[j] += (gr[j] - yr[j] * s) / norms[i];
                            }
                        }
                    });
                }
                Op::InfoNce { sim, tau, weights } => {
                    let b = nodes[sim.0].value.rows();
                    let coef = g[0] / (T::from_f64(b as f64) * *tau);
                    send(*sim, &mut |ds| {
                        for i in 0..b {
                            for j in 0..b {
                                ds[i * b + j] += coef * weights[i * b + j];
                            }
                            ds[i * b + i] -= coef;
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

impl<T: Real> core::ops::Index<Var> for Graph<'_, T> {
    type Output = Tensor<T>;
    fn index(&self, v: Var) -> &Tensor<T> {
        self.value(v)
    }
}

impl<'a, T: Real> core::ops::Deref for Node<'a, T> {
    type Target = Tensor<T>;
    fn deref(&self) -> &Tensor<T> {
        &self.value
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    leaves: BTreeMap<usize, Tensor<T>>,
    params: BTreeMap<ParamRef, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, r: ParamRef) -> Option<&Tensor<T>> {
        self.params.get(&r)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamRef, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().chain(self.leaves.values()).all(|t| t.is_finite())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}
