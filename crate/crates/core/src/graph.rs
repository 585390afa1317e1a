//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape scoped to a single loss evaluation: operations are
//! evaluated eagerly and appended, then [`Graph::backward`] walks the tape in
//! reverse. Binary operations require equal shapes; broadcasting is limited to
//! the explicit [`Graph::add_row`] bias form.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    MeanRowGroups(Var, usize),
    SumRowBlocks(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRowGroups(..) => "mean_row_groups",
            Op::SumRowBlocks(..) => "sum_row_blocks",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-use gradient tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_non_finite: Option<(usize, &'static str)>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-max-shifted softmax of every row of the matrix view.
pub fn softmax_rows_data(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = x.clone();
    let d = out.data_mut();
    for i in 0..r {
        let row = &mut d[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn log_softmax_rows_data(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = x.clone();
    let d = out.data_mut();
    for i in 0..r {
        let row = &mut d[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((idx, op.name()));
        }
        self.nodes.push(Node { value, op });
        Var(idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Fails with the first node that produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let v = av.matmul(bv).expect("matmul: inner dimensions differ");
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, m, k) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(m, bv.cols(), "matmul_nt: column counts differ");
        let mut out = vec![0.0; n * k];
        matmul_nt_into(av.data(), bv.data(), &mut out, n, m, k);
        self.push(Tensor::matrix(n, k, out), Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b)).expect("add: shapes differ");
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b)).expect("sub: shapes differ");
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b)).expect("mul: shapes differ");
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a length-`cols` bias to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        let c = av.cols();
        assert_eq!(bv.len(), c, "add_row: bias length differs from columns");
        let mut v = av.clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += bv.data()[i % c];
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows_data(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows_data(self.value(a));
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// Averages each run of `group` consecutive rows: `(n·group)×c → n×c`.
    pub fn mean_row_groups(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        assert!(group > 0 && r % group == 0, "mean_row_groups: {r} rows, group {group}");
        let n = r / group;
        let mut out = vec![0.0; n * c];
        let inv = 1.0 / group as f64;
        for i in 0..r {
            let dst = i / group;
            for j in 0..c {
                out[dst * c + j] += av.data()[i * c + j] * inv;
            }
        }
        self.push(Tensor::matrix(n, c, out), Op::MeanRowGroups(a, group))
    }

    /// Sums `blocks` stacked blocks of rows: `(blocks·l)×c → l×c`,
    /// `out[t] = Σ_b a[b·l + t]`.
    pub fn sum_row_blocks(&mut self, a: Var, blocks: usize) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        assert!(blocks > 0 && r % blocks == 0, "sum_row_blocks: {r} rows, {blocks} blocks");
        let l = r / blocks;
        let mut out = vec![0.0; l * c];
        for i in 0..r {
            let dst = i % l;
            for j in 0..c {
                out[dst * c + j] += av.data()[i * c + j];
            }
        }
        self.push(Tensor::matrix(l, c, out), Op::SumRowBlocks(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self
            .value(a)
            .gather_rows(&idx)
            .expect("gather_rows: index out of range");
        self.push(v, Op::GatherRows(a, idx))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), r, "concat_cols: row counts differ");
            for i in 0..r {
                out[i * total + offset..i * total + offset + w].copy_from_slice(pv.row(i));
            }
            offset += w;
        }
        self.push(Tensor::matrix(r, total, out), Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c, "concat_rows: column counts differ");
            out.extend_from_slice(pv.data());
        }
        let r = out.len() / c.max(1);
        self.push(Tensor::matrix(r, c, out), Op::ConcatRows(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshape(shape).expect("reshape: element count differs");
        self.push(v, Op::Reshape(a))
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: self.nodes[idx].op.name(),
                    node: idx,
                });
            }
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![0.0; n * k];
                    matmul_nt_into(g.data(), bv.data(), &mut da, n, m, k);
                    let mut db = vec![0.0; k * m];
                    matmul_tn_into(av.data(), g.data(), &mut db, n, k, m);
                    accumulate(&mut grads, *a, Tensor::new(av.shape(), da).unwrap());
                    accumulate(&mut grads, *b, Tensor::new(bv.shape(), db).unwrap());
                }
                Op::MatMulNt(a, b) => {
                    // out = A Bᵀ: dA = G B, dB = Gᵀ A
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, m, k) = (av.rows(), av.cols(), bv.rows());
                    let mut da = vec![0.0; n * m];
                    matmul_into(g.data(), bv.data(), &mut da, n, k, m);
                    let mut db = vec![0.0; k * m];
                    matmul_tn_into(g.data(), av.data(), &mut db, n, k, m);
                    accumulate(&mut grads, *a, Tensor::new(av.shape(), da).unwrap());
                    accumulate(&mut grads, *b, Tensor::new(bv.shape(), db).unwrap());
                }
                Op::Transpose(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.transpose().reshape(&shape).unwrap());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b)).unwrap();
                    let db = g.mul(self.value(*a)).unwrap();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let bv = self.value(*bias);
                    let c = bv.len();
                    let mut db = vec![0.0; c];
                    for (i, x) in g.data().iter().enumerate() {
                        db[i % c] += x;
                    }
                    accumulate(&mut grads, *bias, Tensor::new(bv.shape(), db).unwrap());
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Exp(a) => accumulate(&mut grads, *a, g.mul(out).unwrap()),
                Op::Ln(a) => {
                    let d = g.zip_map(self.value(*a), |gi, x| gi / x).unwrap();
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(out, |gi, y| gi * (1.0 - y * y)).unwrap();
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(out, |gi, y| gi * y * (1.0 - y)).unwrap();
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = g
                        .zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })
                        .unwrap();
                    accumulate(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let d = g.zip_map(self.value(*a), |gi, x| 2.0 * gi * x).unwrap();
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y ⊙ (dy − ⟨dy, y⟩_row)
                    let c = out.cols();
                    let mut d = g.clone();
                    for (dr, yr) in d.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (x, y) in dr.iter_mut().zip(yr) {
                            *x = y * (*x - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    // dx = dy − softmax ⊙ Σ_row dy
                    let c = out.cols();
                    let mut d = g.clone();
                    for (dr, yr) in d.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                        let total: f64 = dr.iter().sum();
                        for (x, y) in dr.iter_mut().zip(yr) {
                            *x -= y.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::full(&shape, g.item()));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let n = av.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(av.shape(), g.item() / n));
                }
                Op::MeanRowGroups(a, group) => {
                    let av = self.value(*a);
                    let (r, c) = (av.rows(), av.cols());
                    let inv = 1.0 / *group as f64;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let src = i / group;
                        for j in 0..c {
                            d[i * c + j] = g.data()[src * c + j] * inv;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(av.shape(), d).unwrap());
                }
                Op::SumRowBlocks(a) => {
                    let av = self.value(*a);
                    let (r, c) = (av.rows(), av.cols());
                    let l = g.rows();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c..(i + 1) * c].copy_from_slice(g.row(i % l));
                    }
                    accumulate(&mut grads, *a, Tensor::new(av.shape(), d).unwrap());
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut d = vec![0.0; av.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[src * c + j] += g.data()[r * c + j];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(av.shape(), d).unwrap());
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = (g.rows(), g.cols());
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, Tensor::new(pv.shape(), d).unwrap());
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        let d = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        accumulate(&mut grads, p, Tensor::new(pv.shape(), d).unwrap());
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(&shape).unwrap());
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
