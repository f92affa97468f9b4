//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every recorded value is a 2-D matrix (scalars are 1×1). A [`Tape`] owns
//! its nodes; [`Var`] is a cheap handle into it. Gradients are produced by
//! [`Tape::backward`] and cleared by [`Tape::zero_grad`].

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_row, softmax_row, Tensor, PROB_FLOOR};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogClamped(Var),
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SelectCols(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    leaf_grad: bool,
}

struct Watch {
    range: Range<usize>,
    counter: Arc<AtomicUsize>,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    watches: Vec<Watch>,
    relu_margin: f64,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            relu_margin: f64::INFINITY,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let (r, c) = dims(&value);
        let value = if value.shape().len() == 2 {
            value
        } else {
            value.reshape(vec![r, c]).expect("2-D view")
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            leaf_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is collected when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let v = self.push(value, Op::Leaf, requires_grad);
        self.nodes[v.0].leaf_grad = requires_grad;
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Smallest |input| seen by any ReLU on this tape.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    /// Increments `counter` once per backward pass that propagates gradient
    /// into any node whose index lies in `range`.
    pub fn watch(&mut self, range: Range<usize>, counter: Arc<AtomicUsize>) {
        self.watches.push(Watch { range, counter });
    }

    fn ng(&self, a: Var) -> bool {
        self.nodes[a.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let da = dims(self.value(a));
        let db = dims(self.value(b));
        if da != db {
            return Err(Error::Dimension(format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = dims(self.value(a));
        let (m2, p) = dims(self.value(b));
        if m != m2 {
            return Err(Error::Dimension(format!("matmul: {n}x{m} times {m2}x{p}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let orow = &mut out[i * p..(i + 1) * p];
            for k in 0..m {
                let aik = av[i * m + k];
                if aik == 0.0 {
                    continue;
                }
                for (o, &bkj) in orow.iter_mut().zip(&bv[k * p..(k + 1) * p]) {
                    *o += aik * bkj;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(n, p, out)?, Op::MatMul(a, b), ng))
    }

    /// Affine map `x · wᵀ + b` for `w` stored as `out × in` and `b` as `1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d_in) = dims(self.value(x));
        let (d_out, d_in2) = dims(self.value(w));
        let (br, bc) = dims(self.value(b));
        if d_in != d_in2 || br != 1 || bc != d_out {
            return Err(Error::Dimension(format!(
                "linear: input {n}x{d_in}, weight {d_out}x{d_in2}, bias {br}x{bc}"
            )));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * d_out];
        for i in 0..n {
            let xr = &xv[i * d_in..(i + 1) * d_in];
            for j in 0..d_out {
                let wr = &wv[j * d_in..(j + 1) * d_in];
                let mut s = bv[j];
                for (a, b) in xr.iter().zip(wr) {
                    s += a * b;
                }
                out[i * d_out + j] = s;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::matrix(n, d_out, out)?, Op::Linear { x, w, b }, ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(r, c, data)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// `a[i, j] * col[i, 0]` for an `r × c` matrix and an `r × 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        if dims(self.value(col)) != (r, 1) {
            return Err(Error::Dimension(format!(
                "mul_col: {r}x{c} with {:?}",
                dims(self.value(col))
            )));
        }
        let av = self.value(a).data();
        let cv = self.value(col).data();
        let data = (0..r * c).map(|k| av[k] * cv[k / c]).collect();
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::MulCol(a, col), ng))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        if dims(self.value(row)) != (1, c) {
            return Err(Error::Dimension(format!(
                "add_row: {r}x{c} with {:?}",
                dims(self.value(row))
            )));
        }
        let av = self.value(a).data();
        let rv = self.value(row).data();
        let data = (0..r * c).map(|k| av[k] + rv[k % c]).collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::AddRow(a, row), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let margin = v.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        let out = v.map(|x| if x > 0.0 { x } else { 0.0 });
        self.relu_margin = self.relu_margin.min(margin);
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    fn rowwise(&mut self, a: Var, f: fn(&[f64], &mut [f64]), op: Op) -> Result<Var> {
        let v = self.value(a);
        if !v.all_finite() {
            return Err(Error::Numeric("non-finite input to softmax".into()));
        }
        let (r, c) = dims(v);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            f(v.row(i), &mut out[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(r, c, out)?, op, ng))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, softmax_row, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, log_softmax_row, Op::LogSoftmax(a))
    }

    /// `ln(max(a, PROB_FLOOR))`; zero gradient below the floor.
    pub fn log_clamped(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(PROB_FLOOR).ln());
        let ng = self.ng(a);
        self.push(v, Op::LogClamped(a), ng)
    }

    /// Row sums as an `r × 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (r, _) = dims(v);
        let data = (0..r).map(|i| v.row(i).iter().sum()).collect();
        let ng = self.ng(a);
        self.push(Tensor::matrix(r, 1, data).unwrap(), Op::SumRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    /// Picks `a[i, cols[i]]` into an `r × 1` column.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = dims(v);
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::Dimension(format!(
                "select_cols: {r}x{c} with {} indices",
                cols.len()
            )));
        }
        let data = cols.iter().enumerate().map(|(i, &j)| v.row(i)[j]).collect();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::matrix(r, 1, data)?,
            Op::SelectCols(a, cols.to_vec()),
            ng,
        ))
    }

    // Composite losses. Each returns an `r × 1` column of per-row values.

    /// `−Σ target · log_softmax(logits)`.
    pub fn cross_entropy(&mut self, target: Var, logits: Var) -> Result<Var> {
        let ls = self.log_softmax(logits)?;
        let prod = self.mul(target, ls)?;
        let s = self.sum_rows(prod);
        Ok(self.scale(s, -1.0))
    }

    /// `KL(softmax(target_logits) ‖ softmax(logits))`, computed in log space.
    pub fn kl_logits(&mut self, target_logits: Var, logits: Var) -> Result<Var> {
        let p = self.softmax(target_logits)?;
        let lp = self.log_softmax(target_logits)?;
        let lq = self.log_softmax(logits)?;
        let d = self.sub(lp, lq)?;
        let prod = self.mul(p, d)?;
        Ok(self.sum_rows(prod))
    }

    /// `KL(p ‖ q)` on probability matrices with clamped logarithms.
    pub fn kl_probs(&mut self, p: Var, q: Var) -> Result<Var> {
        let lp = self.log_clamped(p);
        let lq = self.log_clamped(q);
        let d = self.sub(lp, lq)?;
        let prod = self.mul(p, d)?;
        Ok(self.sum_rows(prod))
    }

    /// `−Σ p log p` on a probability matrix.
    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        let lp = self.log_clamped(p);
        let prod = self.mul(p, lp)?;
        let s = self.sum_rows(prod);
        Ok(self.scale(s, -1.0))
    }

    /// Clears all gradients so that the next backward starts fresh.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Returns zeros for nodes that the loss does not depend on and `None`
    /// for nodes that were created without `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        })
    }

    /// Propagates d(loss)/d(node) to every node that requires gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        self.grads = vec![None; n];
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let mut touched = vec![false; self.watches.len()];
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            for (t, w) in touched.iter_mut().zip(&self.watches) {
                if w.range.contains(&id) && !matches!(self.nodes[id].op, Op::Leaf) {
                    *t = true;
                }
            }
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        for (t, w) in touched.iter().zip(&self.watches) {
            if *t {
                w.counter.fetch_add(1, Ordering::Relaxed);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let (r, c) = dims(&node.value);
        let mut pending: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let (n, m) = dims(&self.nodes[a.0].value);
                let p = c;
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        for k in 0..m {
                            let brow = &bv[k * p..(k + 1) * p];
                            ga[i * m + k] = g[i * p..(i + 1) * p]
                                .iter()
                                .zip(brow)
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    pending.push((a, ga));
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; m * p];
                    for i in 0..n {
                        for k in 0..m {
                            let aik = av[i * m + k];
                            for j in 0..p {
                                gb[k * p + j] += aik * g[i * p + j];
                            }
                        }
                    }
                    pending.push((b, gb));
                }
            }
            &Op::Linear { x, w, b } => {
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                let (n, d_in) = dims(&self.nodes[x.0].value);
                let d_out = c;
                if self.nodes[x.0].needs_grad {
                    let mut gx = vec![0.0; n * d_in];
                    for i in 0..n {
                        let gxr = &mut gx[i * d_in..(i + 1) * d_in];
                        for j in 0..d_out {
                            let gij = g[i * d_out + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (o, &wv) in gxr.iter_mut().zip(&wv[j * d_in..(j + 1) * d_in]) {
                                *o += gij * wv;
                            }
                        }
                    }
                    pending.push((x, gx));
                }
                if self.nodes[w.0].needs_grad {
                    let mut gw = vec![0.0; d_out * d_in];
                    for i in 0..n {
                        let xr = &xv[i * d_in..(i + 1) * d_in];
                        for j in 0..d_out {
                            let gij = g[i * d_out + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (o, &xv) in gw[j * d_in..(j + 1) * d_in].iter_mut().zip(xr) {
                                *o += gij * xv;
                            }
                        }
                    }
                    pending.push((w, gw));
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; d_out];
                    for i in 0..n {
                        for j in 0..d_out {
                            gb[j] += g[i * d_out + j];
                        }
                    }
                    pending.push((b, gb));
                }
            }
            &Op::Add(a, b) => {
                pending.push((a, g.to_vec()));
                pending.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                pending.push((a, g.to_vec()));
                pending.push((b, g.iter().map(|v| -v).collect()));
            }
            &Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if self.nodes[a.0].needs_grad {
                    pending.push((a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                }
                if self.nodes[b.0].needs_grad {
                    pending.push((b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                }
            }
            &Op::Scale(a, k) => pending.push((a, g.iter().map(|v| v * k).collect())),
            &Op::MulCol(a, col) => {
                let av = self.nodes[a.0].value.data();
                let cv = self.nodes[col.0].value.data();
                if self.nodes[a.0].needs_grad {
                    pending.push((a, (0..r * c).map(|k| g[k] * cv[k / c]).collect()));
                }
                if self.nodes[col.0].needs_grad {
                    let gc = (0..r)
                        .map(|i| (0..c).map(|j| g[i * c + j] * av[i * c + j]).sum())
                        .collect();
                    pending.push((col, gc));
                }
            }
            &Op::AddRow(a, row) => {
                pending.push((a, g.to_vec()));
                if self.nodes[row.0].needs_grad {
                    let mut gr = vec![0.0; c];
                    for k in 0..r * c {
                        gr[k % c] += g[k];
                    }
                    pending.push((row, gr));
                }
            }
            &Op::Relu(a) => {
                let av = self.nodes[a.0].value.data();
                pending.push((
                    a,
                    g.iter()
                        .zip(av)
                        .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                        .collect(),
                ));
            }
            &Op::Softmax(a) => {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let s = &out[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let dot: f64 = s.iter().zip(gi).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        ga[i * c + j] = s[j] * (gi[j] - dot);
                    }
                }
                pending.push((a, ga));
            }
            &Op::LogSoftmax(a) => {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let ls = &out[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let total: f64 = gi.iter().sum();
                    for j in 0..c {
                        ga[i * c + j] = gi[j] - ls[j].exp() * total;
                    }
                }
                pending.push((a, ga));
            }
            &Op::LogClamped(a) => {
                let av = self.nodes[a.0].value.data();
                pending.push((
                    a,
                    g.iter()
                        .zip(av)
                        .map(|(&gi, &x)| if x > PROB_FLOOR { gi / x } else { 0.0 })
                        .collect(),
                ));
            }
            &Op::SumRows(a) => {
                let (_, ac) = dims(&self.nodes[a.0].value);
                pending.push((a, (0..r * ac).map(|k| g[k / ac]).collect()));
            }
            &Op::SumAll(a) => {
                let n = self.nodes[a.0].value.numel();
                pending.push((a, vec![g[0]; n]));
            }
            &Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel();
                pending.push((a, vec![g[0] / n as f64; n]));
            }
            Op::SelectCols(a, cols) => {
                let a = *a;
                let (ar, ac) = dims(&self.nodes[a.0].value);
                let mut ga = vec![0.0; ar * ac];
                for (i, &j) in cols.iter().enumerate() {
                    ga[i * ac + j] = g[i];
                }
                pending.push((a, ga));
            }
        }
        for (v, contrib) in pending {
            self.accumulate(v, contrib);
        }
    }
}
