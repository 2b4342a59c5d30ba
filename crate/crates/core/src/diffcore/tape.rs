use crate::diffcore::tensor::{matmul_into, Tensor};
use crate::error::{OanError, Result};
use crate::scalar::Scalar;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulElem(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Transpose(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Clamp { x: Var, lo: T, hi: T },
    LogSoftmaxRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<T> },
    PairwiseSqDist(Var),
    GaussianKernel { x: Var, mu: T, sigma_sq: T },
    Sum(Var),
    GatherRows { table: Var, ids: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Norm below which a row cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;

/// Wengert list of executed operations. Records are appended in execution
/// order; [`Tape::backward`] walks them in reverse.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut value = value;
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Records a leaf; keeps the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a constant leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value; gradient does not flow back.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.detached();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(OanError::Shape {
                op: "add",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x[m×n] + 1·row[1×n]`, broadcasting the row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(OanError::Shape {
                op: "add_row",
                left: tx.shape(),
                right: tr.shape(),
            });
        }
        let mut out = tx.detached();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(OanError::Shape {
                op: "mul_elem",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MulElem(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so bad inputs surface downstream
        let out = self.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::ln);
        let rg = self.rg(x);
        self.push(out, Op::Ln(x), rg)
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// Row-wise log-softmax using the max-shifted log-sum-exp.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.cols() == 0 {
            return Err(OanError::config("log_softmax_rows needs at least one column"));
        }
        if !tx.is_finite() {
            return Err(OanError::Numeric("log_softmax_rows input".into()));
        }
        let mut out = tx.detached();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmaxRows(x), rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut out = tx.detached();
        let mut norms = Vec::with_capacity(tx.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !n.is_finite() {
                return Err(OanError::Numeric(format!("l2_normalize_rows: non-finite norm in row {r}")));
            }
            if n < T::lit(MIN_NORM) {
                return Err(OanError::Degenerate {
                    context: "l2_normalize_rows",
                    row: r,
                });
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Squared Euclidean distances between all row pairs, `m×m`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let m = tx.rows();
        if m < 2 {
            return Err(OanError::InsufficientPairs {
                op: "pairwise_sq_dist",
                rows: m,
            });
        }
        let mut out = Tensor::zeros(m, m);
        for i in 0..m {
            for j in (i + 1)..m {
                let d: T = tx
                    .row(i)
                    .iter()
                    .zip(tx.row(j))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                let d = d.max(T::zero());
                out.set(i, j, d);
                out.set(j, i, d);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::PairwiseSqDist(x), rg))
    }

    /// Elementwise `coef · exp(−(x − mu)² / (2·sigma_sq))`.
    pub fn gaussian_kernel(&mut self, x: Var, mu: T, sigma_sq: T, coef: T) -> Result<Var> {
        if !(sigma_sq > T::zero()) {
            return Err(OanError::config("kernel variance must be positive"));
        }
        let two_var = sigma_sq + sigma_sq;
        let out = self
            .value(x)
            .map(|d| coef * (-((d - mu) * (d - mu)) / two_var).exp());
        let rg = self.rg(x);
        Ok(self.push(out, Op::GaussianKernel { x, mu, sigma_sq }, rg))
    }

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Rows of `table` selected by `ids`; gradient scatters back additively.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).select_rows(ids)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a 1×1 output. Every recorded tensor that requires
    /// gradient ends up with a populated `grad`; previous gradients are
    /// overwritten, so repeated calls yield identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(OanError::Shape {
                op: "backward",
                left: self.shape(loss),
                right: (1, 1),
            });
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![T::one()]);

        for idx in (0..n).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if node.value.requires_grad {
                node.value.grad = Some(a.unwrap_or_else(|| vec![T::zero(); node.value.len()]));
            } else {
                node.value.grad = None;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].value.requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(contrib) {
                        *b += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if ta.requires_grad {
                    let bt = tb.transpose();
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(g, bt.data(), &mut da, m, n, k);
                    acc(*a, da);
                }
                if tb.requires_grad {
                    let at = ta.transpose();
                    let mut db = vec![T::zero(); k * n];
                    matmul_into(at.data(), g, &mut db, k, m, n);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddRow(x, row) => {
                acc(*x, g.to_vec());
                let cols = out.cols();
                let mut db = vec![T::zero(); cols];
                for r in g.chunks(cols) {
                    for (d, &v) in db.iter_mut().zip(r) {
                        *d += v;
                    }
                }
                acc(*row, db);
            }
            Op::MulElem(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(tb.data()).map(|(&gi, &y)| gi * y).collect());
                acc(*b, g.iter().zip(ta.data()).map(|(&gi, &x)| gi * x).collect());
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&gi| gi * *c).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::Transpose(x) => {
                let gt = Tensor::new(out.rows(), out.cols(), g.to_vec())
                    .expect("gradient shape")
                    .transpose();
                acc(*x, gt.into_data());
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(tx.data())
                        .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                        .collect(),
                );
            }
            Op::Exp(x) => acc(*x, g.iter().zip(out.data()).map(|(&gi, &y)| gi * y).collect()),
            Op::Ln(x) => {
                let tx = self.value(*x);
                acc(*x, g.iter().zip(tx.data()).map(|(&gi, &v)| gi / v).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let tx = self.value(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(tx.data())
                        .map(|(&gi, &v)| if v >= *lo && v <= *hi { gi } else { T::zero() })
                        .collect(),
                );
            }
            Op::LogSoftmaxRows(x) => {
                let cols = out.cols();
                let mut dx = vec![T::zero(); out.len()];
                for r in 0..out.rows() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let total: T = gr.iter().copied().sum();
                    for c in 0..cols {
                        let p = out.get(r, c).exp();
                        dx[r * cols + c] = gr[c] - p * total;
                    }
                }
                acc(*x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let cols = out.cols();
                let mut dx = vec![T::zero(); out.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = (gr[c] - y[c] * dot) / norms[r];
                    }
                }
                acc(*x, dx);
            }
            Op::PairwiseSqDist(x) => {
                let tx = self.value(*x);
                let (m, d) = tx.shape();
                let mut dx = vec![T::zero(); m * d];
                let two = T::lit(2.0);
                for i in 0..m {
                    for j in 0..m {
                        if i == j {
                            continue;
                        }
                        let w = two * (g[i * m + j] + g[j * m + i]);
                        if w == T::zero() {
                            continue;
                        }
                        for c in 0..d {
                            dx[i * d + c] += w * (tx.get(i, c) - tx.get(j, c));
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::GaussianKernel { x, mu, sigma_sq } => {
                let tx = self.value(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(tx.data())
                        .zip(out.data())
                        .map(|((&gi, &d), &y)| gi * y * (-(d - *mu) / *sigma_sq))
                        .collect(),
                );
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0]; n]);
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let cols = tt.cols();
                let mut dt = vec![T::zero(); tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        dt[id * cols + c] += g[r * cols + c];
                    }
                }
                acc(*table, dt);
            }
        }
    }
}

/// `log Σ exp(x)` with max shifting.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = xs.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}
