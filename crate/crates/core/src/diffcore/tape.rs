//! Recording tape and reverse sweep.

use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use super::DiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activations of the search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Linear,
    Softplus,
    LeakyRelu,
    Relu6,
    Elu,
}

pub const LEAKY_RELU_SLOPE: f64 = 0.2;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Activation {
    pub const ALL: [Activation; 8] = [
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Relu,
        Activation::Linear,
        Activation::Softplus,
        Activation::LeakyRelu,
        Activation::Relu6,
        Activation::Elu,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
            Activation::Softplus => softplus(x),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_RELU_SLOPE * x
                }
            }
            Activation::Relu6 => x.max(0.0).min(6.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Softplus => {
                if x > 30.0 {
                    1.0
                } else {
                    sigmoid(x)
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            Activation::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
    }
}

/// Segment reduction kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

const NO_WINNER: usize = usize::MAX;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Act(Var, Activation),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    GatherRows(Var, Rc<[usize]>),
    Segment {
        x: Var,
        ids: Rc<[usize]>,
        mask: Option<Rc<[bool]>>,
        kind: Reduce,
        counts: Vec<usize>,
        winners: Vec<usize>,
    },
    SegmentSoftmax {
        x: Var,
        ids: Rc<[usize]>,
        mask: Option<Rc<[bool]>>,
    },
    RowReduce {
        x: Var,
        kind: Reduce,
        winners: Vec<usize>,
    },
    RowDot(Var, Var),
    SumAll(Var),
    EdgeMix(Var, Rc<Tensor>),
    GaussianNll(Var, Var, Rc<[f64]>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records forward computations so that gradients can be swept backward.
///
/// Node ids are assigned in creation order, which is a topological order by
/// construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(what: &str, a: &[usize], b: &[usize]) -> DiffError {
    DiffError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            ta.data(),
            k as isize,
            1,
            tb.data(),
            m as isize,
            1,
            0.0,
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), ng))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(mismatch(what, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[n, c] + bias[c]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return Err(mismatch("add_row", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddRow(x, bias), ng))
    }

    /// `x[n, c] * r[c]`, broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var, DiffError> {
        let (tx, tr) = (self.value(x), self.value(r));
        let c = tx.cols();
        if tr.len() != c {
            return Err(mismatch("mul_row", tx.shape(), tr.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (v, s) in row.iter_mut().zip(tr.data()) {
                *v *= s;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(r);
        Ok(self.push(out, Op::MulRow(x, r), ng))
    }

    /// `x[n, c] * col[n]`, broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var, DiffError> {
        let (tx, tc) = (self.value(x), self.value(col));
        let (n, c) = (tx.rows(), tx.cols());
        if tc.len() != n {
            return Err(mismatch("mul_col", tx.shape(), tc.shape()));
        }
        let mut data = tx.data().to_vec();
        for (i, row) in data.chunks_mut(c.max(1)).enumerate() {
            let s = tc.data()[i];
            row.iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(col);
        Ok(self.push(out, Op::MulCol(x, col), ng))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Affine(x, scale), ng))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| kind.apply(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Act(x, kind), ng))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::ShapeMismatch("concat of nothing".into()))?;
        let n = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for p in parts {
            if self.value(*p).rows() != n {
                return Err(mismatch("concat", self.value(*first).shape(), self.value(*p).shape()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let t = self.value(*p);
            for i in 0..n {
                data[i * total + offset..i * total + offset + w].copy_from_slice(t.row(i));
            }
            offset += w;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor::new(vec![n, total], data)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let (n, c) = (tx.rows(), tx.cols());
        if start > end || end > c {
            return Err(DiffError::ShapeMismatch(format!(
                "slice {start}..{end} of {:?}",
                tx.shape()
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&tx.row(i)[start..end]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, w], data)?, Op::SliceCols(x, start), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let out = self.value(x).reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let (n, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= n {
                return Err(DiffError::ShapeMismatch(format!(
                    "gather index {i} out of {n} rows"
                )));
            }
            data.extend_from_slice(tx.row(i));
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], data)?,
            Op::GatherRows(x, idx),
            ng,
        ))
    }

    /// Reduces rows of `x[m, c]` into `n_seg` segments given by `ids`.
    ///
    /// Rows whose mask entry is false are ignored. A segment with no
    /// contributing rows produces zeros for every kind.
    pub fn segment_reduce(
        &mut self,
        x: Var,
        ids: Rc<[usize]>,
        n_seg: usize,
        kind: Reduce,
        mask: Option<Rc<[bool]>>,
    ) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let (m, c) = (tx.rows(), tx.cols());
        check_segments(m, &ids, n_seg, mask.as_deref())?;
        let mut out = vec![0.0; n_seg * c];
        let mut counts = vec![0usize; n_seg];
        let mut winners = Vec::new();
        let live = |i: usize| mask.as_ref().map_or(true, |mk| mk[i]);
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for i in 0..m {
                    if !live(i) {
                        continue;
                    }
                    let s = ids[i];
                    counts[s] += 1;
                    let row = tx.row(i);
                    for (o, v) in out[s * c..(s + 1) * c].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                if kind == Reduce::Mean {
                    for s in 0..n_seg {
                        if counts[s] > 0 {
                            let inv = 1.0 / counts[s] as f64;
                            out[s * c..(s + 1) * c].iter_mut().for_each(|o| *o *= inv);
                        }
                    }
                }
            }
            Reduce::Max => {
                winners = vec![NO_WINNER; n_seg * c];
                out.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
                for i in 0..m {
                    if !live(i) {
                        continue;
                    }
                    let s = ids[i];
                    counts[s] += 1;
                    let row = tx.row(i);
                    for j in 0..c {
                        if row[j] > out[s * c + j] {
                            out[s * c + j] = row[j];
                            winners[s * c + j] = i;
                        }
                    }
                }
                for (o, w) in out.iter_mut().zip(&winners) {
                    if *w == NO_WINNER {
                        *o = 0.0;
                    }
                }
            }
        }
        if kind != Reduce::Sum && counts.iter().any(|&k| k == 0) {
            log::trace!("segment_reduce: empty segment(s) produce zeros");
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![n_seg, c], out)?,
            Op::Segment {
                x,
                ids,
                mask,
                kind,
                counts,
                winners,
            },
            ng,
        ))
    }

    /// Softmax of a score vector within each segment. Masked entries get
    /// probability zero.
    pub fn segment_softmax(
        &mut self,
        scores: Var,
        ids: Rc<[usize]>,
        n_seg: usize,
        mask: Option<Rc<[bool]>>,
    ) -> Result<Var, DiffError> {
        let tx = self.value(scores);
        if tx.cols() != 1 {
            return Err(DiffError::ShapeMismatch(format!(
                "segment_softmax expects a vector, got {:?}",
                tx.shape()
            )));
        }
        let m = tx.rows();
        check_segments(m, &ids, n_seg, mask.as_deref())?;
        let live = |i: usize| mask.as_ref().map_or(true, |mk| mk[i]);
        let x = tx.data();
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for i in 0..m {
            if live(i) && x[i] > max[ids[i]] {
                max[ids[i]] = x[i];
            }
        }
        let mut out = vec![0.0; m];
        let mut denom = vec![0.0; n_seg];
        for i in 0..m {
            if live(i) {
                out[i] = (x[i] - max[ids[i]]).exp();
                denom[ids[i]] += out[i];
            }
        }
        for i in 0..m {
            if live(i) {
                out[i] /= denom[ids[i]];
            }
        }
        let shape = tx.shape().to_vec();
        let ng = self.ng(scores);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SegmentSoftmax {
                x: scores,
                ids,
                mask,
            },
            ng,
        ))
    }

    /// Reduces each row of `x[n, c]` to one value, giving `[n, 1]`.
    pub fn row_reduce(&mut self, x: Var, kind: Reduce) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let (n, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; n];
        let mut winners = Vec::new();
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for i in 0..n {
                    out[i] = tx.row(i).iter().sum();
                    if kind == Reduce::Mean && c > 0 {
                        out[i] /= c as f64;
                    }
                }
            }
            Reduce::Max => {
                winners = vec![NO_WINNER; n];
                for i in 0..n {
                    let row = tx.row(i);
                    let mut best = f64::NEG_INFINITY;
                    for (j, &v) in row.iter().enumerate() {
                        if v > best {
                            best = v;
                            winners[i] = j;
                        }
                    }
                    out[i] = if winners[i] == NO_WINNER { 0.0 } else { best };
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![n, 1], out)?,
            Op::RowReduce { x, kind, winners },
            ng,
        ))
    }

    /// Row-wise inner products of two equal-shape matrices, giving `[n, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("row_dot", ta.shape(), tb.shape()));
        }
        let n = ta.rows();
        let out = (0..n)
            .map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, 1], out)?, Op::RowDot(a, b), ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), ng))
    }

    /// Edge-conditioned transform.
    ///
    /// `y[m, (f + 1) * d]` holds, for each edge, the source state pushed
    /// through `f + 1` stacked `d x d` blocks; the result is
    /// `out[e] = sum_k feats[e, k] * y[e, block k] + y[e, block f]`, which
    /// equals `reshape(feats[e] * A + B) * h_src[e]` for a linear edge
    /// network with weights `A` and bias `B`.
    pub fn edge_mix(&mut self, y: Var, feats: Rc<Tensor>) -> Result<Var, DiffError> {
        let ty = self.value(y);
        let (m, f) = (feats.rows(), feats.cols());
        if ty.rows() != m || ty.cols() % (f + 1) != 0 {
            return Err(mismatch("edge_mix", ty.shape(), feats.shape()));
        }
        let d = ty.cols() / (f + 1);
        let mut out = vec![0.0; m * d];
        for e in 0..m {
            let row = ty.row(e);
            let o = &mut out[e * d..(e + 1) * d];
            o.copy_from_slice(&row[f * d..(f + 1) * d]);
            for (k, &w) in feats.row(e).iter().enumerate() {
                if w != 0.0 {
                    for (oj, yj) in o.iter_mut().zip(&row[k * d..(k + 1) * d]) {
                        *oj += w * yj;
                    }
                }
            }
        }
        let ng = self.ng(y);
        Ok(self.push(Tensor::new(vec![m, d], out)?, Op::EdgeMix(y, feats), ng))
    }

    /// Mean Gaussian negative log-likelihood
    /// `1/(2n) * sum(ln 2pi + ln var + (mu - y)^2 / var)`.
    pub fn gaussian_nll(&mut self, mu: Var, var: Var, y: Rc<[f64]>) -> Result<Var, DiffError> {
        let (tm, tv) = (self.value(mu), self.value(var));
        let n = y.len();
        if tm.len() != n || tv.len() != n || n == 0 {
            return Err(mismatch("gaussian_nll", tm.shape(), tv.shape()));
        }
        if tv.data().iter().any(|&v| !(v > 0.0)) {
            return Err(DiffError::NonPositiveVariance);
        }
        let v = nll_value(tm.data(), tv.data(), &y);
        let ng = self.ng(mu) || self.ng(var);
        Ok(self.push(Tensor::scalar(v), Op::GaussianNll(mu, var, y), ng))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut()
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(da) = self.acc(grads, *a) {
                    // da += g * b^T
                    gemm(n, m, k, gd, m as isize, 1, tb.data(), 1, m as isize, 1.0, da.data_mut());
                }
                if let Some(db) = self.acc(grads, *b) {
                    // db += a^T * g
                    gemm(k, n, m, ta.data(), 1, k as isize, gd, m as isize, 1, 1.0, db.data_mut());
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.data_mut().iter_mut().zip(gd).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, x), y) in da.data_mut().iter_mut().zip(gd).zip(tb.data()) {
                        *d += x * y;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, x), y) in db.data_mut().iter_mut().zip(gd).zip(ta.data()) {
                        *d += x * y;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let c = self.value(*x).cols().max(1);
                if let Some(dx) = self.acc(grads, *x) {
                    dx.add_assign(g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    let dbd = db.data_mut();
                    for row in gd.chunks(c) {
                        for (d, v) in dbd.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::MulRow(x, r) => {
                let (tx, tr) = (self.value(*x), self.value(*r));
                let c = tx.cols().max(1);
                if let Some(dx) = self.acc(grads, *x) {
                    for (drow, grow) in dx.data_mut().chunks_mut(c).zip(gd.chunks(c)) {
                        for ((d, gv), s) in drow.iter_mut().zip(grow).zip(tr.data()) {
                            *d += gv * s;
                        }
                    }
                }
                if let Some(dr) = self.acc(grads, *r) {
                    let drd = dr.data_mut();
                    for (xrow, grow) in tx.data().chunks(c).zip(gd.chunks(c)) {
                        for ((d, gv), xv) in drd.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                }
            }
            Op::MulCol(x, col) => {
                let (tx, tc) = (self.value(*x), self.value(*col));
                let c = tx.cols().max(1);
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, (drow, grow)) in dx.data_mut().chunks_mut(c).zip(gd.chunks(c)).enumerate() {
                        let s = tc.data()[i];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += gv * s;
                        }
                    }
                }
                if let Some(dc) = self.acc(grads, *col) {
                    for (i, (xrow, grow)) in tx.data().chunks(c).zip(gd.chunks(c)).enumerate() {
                        dc.data_mut()[i] += xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Affine(x, scale) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.data_mut().iter_mut().zip(gd).for_each(|(d, v)| *d += scale * v);
                }
            }
            Op::Act(x, kind) => {
                let tx = self.value(*x);
                let y = node.value.data();
                if let Some(dx) = self.acc(grads, *x) {
                    for (((d, gv), xv), yv) in dx.data_mut().iter_mut().zip(gd).zip(tx.data()).zip(y) {
                        *d += gv * kind.derivative(*xv, *yv);
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let n = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(dp) = self.acc(grads, *p) {
                        let dpd = dp.data_mut();
                        for i in 0..n {
                            for j in 0..w {
                                dpd[i * w + j] += gd[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let c = self.value(*x).cols();
                let w = node.value.cols();
                let n = node.value.rows();
                if let Some(dx) = self.acc(grads, *x) {
                    let dxd = dx.data_mut();
                    for i in 0..n {
                        for j in 0..w {
                            dxd[i * c + start + j] += gd[i * w + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.add_assign(g);
                }
            }
            Op::GatherRows(x, idx) => {
                let c = node.value.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    let dxd = dx.data_mut();
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            dxd[i * c + j] += gd[r * c + j];
                        }
                    }
                }
            }
            Op::Segment {
                x,
                ids,
                mask,
                kind,
                counts,
                winners,
            } => {
                let c = node.value.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    let dxd = dx.data_mut();
                    match kind {
                        Reduce::Sum | Reduce::Mean => {
                            for (i, &s) in ids.iter().enumerate() {
                                if mask.as_ref().is_some_and(|mk| !mk[i]) {
                                    continue;
                                }
                                let scale = if *kind == Reduce::Mean {
                                    1.0 / counts[s] as f64
                                } else {
                                    1.0
                                };
                                for j in 0..c {
                                    dxd[i * c + j] += scale * gd[s * c + j];
                                }
                            }
                        }
                        Reduce::Max => {
                            for (k, &w) in winners.iter().enumerate() {
                                if w != NO_WINNER {
                                    dxd[w * c + k % c] += gd[k];
                                }
                            }
                        }
                    }
                }
            }
            Op::SegmentSoftmax { x, ids, mask } => {
                let y = node.value.data();
                let n_seg = ids.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg];
                for (i, &s) in ids.iter().enumerate() {
                    dot[s] += gd[i] * y[i];
                }
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, &s) in ids.iter().enumerate() {
                        if mask.as_ref().is_some_and(|mk| !mk[i]) {
                            continue;
                        }
                        dx.data_mut()[i] += y[i] * (gd[i] - dot[s]);
                    }
                }
            }
            Op::RowReduce { x, kind, winners } => {
                let c = self.value(*x).cols();
                if let Some(dx) = self.acc(grads, *x) {
                    let dxd = dx.data_mut();
                    match kind {
                        Reduce::Sum | Reduce::Mean => {
                            let scale = if *kind == Reduce::Mean && c > 0 {
                                1.0 / c as f64
                            } else {
                                1.0
                            };
                            for (i, gv) in gd.iter().enumerate() {
                                for j in 0..c {
                                    dxd[i * c + j] += scale * gv;
                                }
                            }
                        }
                        Reduce::Max => {
                            for (i, &w) in winners.iter().enumerate() {
                                if w != NO_WINNER {
                                    dxd[i * c + w] += gd[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                if let Some(da) = self.acc(grads, *a) {
                    for (i, gv) in gd.iter().enumerate() {
                        for j in 0..c {
                            da.data_mut()[i * c + j] += gv * tb.data()[i * c + j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (i, gv) in gd.iter().enumerate() {
                        for j in 0..c {
                            db.data_mut()[i * c + j] += gv * ta.data()[i * c + j];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let s = gd[0];
                if let Some(dx) = self.acc(grads, *x) {
                    dx.data_mut().iter_mut().for_each(|d| *d += s);
                }
            }
            Op::EdgeMix(y, feats) => {
                let f = feats.cols();
                let d = node.value.cols();
                let w = (f + 1) * d;
                if let Some(dy) = self.acc(grads, *y) {
                    let dyd = dy.data_mut();
                    for e in 0..feats.rows() {
                        let ge = &gd[e * d..(e + 1) * d];
                        let row = &mut dyd[e * w..(e + 1) * w];
                        for (r, gv) in row[f * d..].iter_mut().zip(ge) {
                            *r += gv;
                        }
                        for (k, &fv) in feats.row(e).iter().enumerate() {
                            if fv != 0.0 {
                                for (r, gv) in row[k * d..(k + 1) * d].iter_mut().zip(ge) {
                                    *r += fv * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::GaussianNll(mu, var, y) => {
                let (tm, tv) = (self.value(*mu), self.value(*var));
                let n = y.len() as f64;
                let s = gd[0];
                if let Some(dm) = self.acc(grads, *mu) {
                    for (i, d) in dm.data_mut().iter_mut().enumerate() {
                        *d += s * (tm.data()[i] - y[i]) / (n * tv.data()[i]);
                    }
                }
                if let Some(dv) = self.acc(grads, *var) {
                    for (i, d) in dv.data_mut().iter_mut().enumerate() {
                        let v = tv.data()[i];
                        let r2 = (tm.data()[i] - y[i]).powi(2);
                        *d += s * (1.0 / v - r2 / (v * v)) / (2.0 * n);
                    }
                }
            }
        }
    }
}

fn check_segments(
    m: usize,
    ids: &[usize],
    n_seg: usize,
    mask: Option<&[bool]>,
) -> Result<(), DiffError> {
    if ids.len() != m {
        return Err(DiffError::ShapeMismatch(format!(
            "{} segment ids for {m} rows",
            ids.len()
        )));
    }
    if let Some(mk) = mask {
        if mk.len() != m {
            return Err(DiffError::ShapeMismatch(format!(
                "mask of length {} for {m} rows",
                mk.len()
            )));
        }
    }
    if let Some(&bad) = ids.iter().find(|&&s| s >= n_seg) {
        return Err(DiffError::ShapeMismatch(format!(
            "segment id {bad} out of range {n_seg}"
        )));
    }
    Ok(())
}

/// Mean Gaussian NLL on plain slices.
pub fn nll_value(mu: &[f64], var: &[f64], y: &[f64]) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let n = y.len() as f64;
    let s: f64 = mu
        .iter()
        .zip(var)
        .zip(y)
        .map(|((m, v), t)| ln2pi + v.ln() + (m - t).powi(2) / v)
        .sum();
    s / (2.0 * n)
}
