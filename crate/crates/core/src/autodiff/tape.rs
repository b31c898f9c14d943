use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient of a scalar loss with respect to every registered parameter.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, Axis),
    Softmax(Var, f64),
    Log(Var),
    Exp(Var),
    Normalize(Var, f64),
    RowDot(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Prelu(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumers and the reverse sweep in [`Tape::backward`] is a plain reverse
/// iteration.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Param(format!("{name} must be positive, got {v}")))
    }
}

/// Per-row scale factor of the floored normalisation: rows with norm at least
/// `rho` go to the unit sphere, shorter rows to the sphere of radius `rho`.
fn floor_factor(norm: f64, rho: f64) -> f64 {
    if norm >= rho {
        1.0
    } else {
        rho
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::RowDot(a, b)
            | Op::Prelu(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Concat(xs, _) => xs.iter().any(|x| self.nodes[x.0].needs_grad),
            Op::Scale(a, _)
            | Op::Softmax(a, _)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Normalize(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Registers a trainable leaf under `name`.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        self.push(t, Op::Param(name.to_string()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1×c` row to every row of an `n×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = self.value(a).dims();
        let r = self.value(row);
        if r.dims() != (1, c) {
            return Err(Error::shape("add_row", self.value(a).shape(), r.shape()));
        }
        let mut out = self.value(a).clone();
        let rv = r.values().to_vec();
        for i in 0..n {
            for (o, b) in out.row_slice_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn concat(&mut self, xs: &[Var], axis: Axis) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (r0, c0) = self.value(first).dims();
        let out = match axis {
            Axis::Rows => {
                let mut vals = Vec::new();
                let mut rows = 0;
                for &x in xs {
                    let t = self.value(x);
                    if t.cols() != c0 {
                        return Err(Error::shape("concat", self.value(first).shape(), t.shape()));
                    }
                    rows += t.rows();
                    vals.extend_from_slice(t.values());
                }
                Tensor::matrix(rows, c0, vals)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &x in xs {
                    let t = self.value(x);
                    if t.rows() != r0 {
                        return Err(Error::shape("concat", self.value(first).shape(), t.shape()));
                    }
                    cols += t.cols();
                }
                let mut vals = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &x in xs {
                        vals.extend_from_slice(self.value(x).row_slice(i));
                    }
                }
                Tensor::matrix(r0, cols, vals)?
            }
        };
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis)))
    }

    /// Row-wise softmax of `a / tau` (max-subtracted).
    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        check_positive("softmax temperature", tau)?;
        let x = self.value(a);
        let (n, c) = x.dims();
        let mut out = x.clone();
        for i in 0..n {
            let row = out.row_slice_mut(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = ((*v - max) / tau).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let _ = c;
        Ok(self.push(out, Op::Softmax(a, tau)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.values().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Param(format!("log of non-positive value {bad}")));
        }
        let out = x.map(f64::ln);
        Ok(self.push(out, Op::Log(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// Row L2 normalisation with norm floor `rho`: rows whose norm reaches
    /// `rho` are scaled to unit norm, shorter rows are rescaled to norm `rho`,
    /// and exactly-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var, rho: f64) -> Result<Var> {
        check_positive("norm floor", rho)?;
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_slice_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                let s = floor_factor(norm, rho) / norm;
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        Ok(self.push(out, Op::Normalize(a, rho)))
    }

    /// Inner product of matching rows, giving an `n×1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("row_dot", x.shape(), y.shape()));
        }
        let n = x.rows();
        let vals = (0..n)
            .map(|i| x.row_slice(i).iter().zip(y.row_slice(i)).map(|(p, q)| p * q).sum())
            .collect();
        let out = Tensor::matrix(n, 1, vals)?;
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / x.len().max(1) as f64);
        self.push(out, Op::Mean(a))
    }

    /// Column means, i.e. mean pooling over rows, giving `1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.dims();
        if n == 0 {
            return Err(Error::Contract("mean pooling over zero rows".into()));
        }
        let mut vals = vec![0.0; c];
        for i in 0..n {
            for (o, v) in vals.iter_mut().zip(x.row_slice(i)) {
                *o += v;
            }
        }
        vals.iter_mut().for_each(|v| *v /= n as f64);
        let out = Tensor::row(vals);
        Ok(self.push(out, Op::MeanRows(a)))
    }

    /// PReLU with a learnable `1×1` slope.
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        let s = self.value(slope);
        if s.len() != 1 {
            return Err(Error::shape("prelu", self.value(a).shape(), s.shape()));
        }
        let s = s.item();
        let out = self.value(a).map(|v| if v > 0.0 { v } else { s * v });
        Ok(self.push(out, Op::Prelu(a, slope)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).reshaped(rows, cols)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Row selection: output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::shape("gather_rows", x.shape(), &[bad]));
        }
        let out = x.select_rows(idx);
        Ok(self.push(out, Op::Gather(a, idx.to_vec())))
    }

    /// Adds input row `e` into output row `idx[e]` of an `rows×c` zero matrix.
    ///
    /// Each output row sums its contributions in a content-defined order, so
    /// the result depends only on the multiset of incoming rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let x = self.value(a);
        if idx.len() != x.rows() {
            return Err(Error::shape("scatter_add_rows", x.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("scatter_add_rows", &[rows], &[bad]));
        }
        let c = x.cols();
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); rows];
        for (e, &t) in idx.iter().enumerate() {
            buckets[t].push(e);
        }
        let mut out = Tensor::zeros(rows, c);
        for (t, bucket) in buckets.iter_mut().enumerate() {
            bucket.sort_by(|&p, &q| lexicographic(x.row_slice(p), x.row_slice(q)));
            let dst = out.row_slice_mut(t);
            for &e in bucket.iter() {
                for (o, v) in dst.iter_mut().zip(x.row_slice(e)) {
                    *o += v;
                }
            }
        }
        Ok(self.push(out, Op::ScatterAdd(a, idx.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`. Every registered parameter gets an
    /// entry; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(_) => {
                    grads[i] = Some(dy);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let da = dy.matmul_t(self.value(*b))?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.needs(*b) {
                        let db = self.value(*a).t_matmul(&dy)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let da = dy.zip_map(self.value(*b), "mul", |g, v| g * v)?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.needs(*b) {
                        let db = dy.zip_map(self.value(*a), "mul", |g, v| g * v)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::AddRow(a, r) => {
                    if self.needs(*r) {
                        let (n, c) = dy.dims();
                        let mut dr = vec![0.0; c];
                        for k in 0..n {
                            for (o, g) in dr.iter_mut().zip(dy.row_slice(k)) {
                                *o += g;
                            }
                        }
                        accumulate(&mut grads, *r, Tensor::row(dr))?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy)?;
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, dy.scale(*s))?;
                }
                Op::Concat(xs, axis) => {
                    let mut offset = 0;
                    for &x in xs {
                        let (r, c) = self.value(x).dims();
                        let part = match axis {
                            Axis::Rows => {
                                let cols = dy.cols();
                                let t = Tensor::matrix(
                                    r,
                                    c,
                                    dy.values()[offset * cols..(offset + r) * cols].to_vec(),
                                )?;
                                offset += r;
                                t
                            }
                            Axis::Cols => {
                                let t = dy.col_block(offset, offset + c);
                                offset += c;
                                t
                            }
                        };
                        if self.needs(x) {
                            accumulate(&mut grads, x, part)?;
                        }
                    }
                }
                Op::Softmax(a, tau) => {
                    let mut dx = dy.clone();
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = dy.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for ((o, p), g) in dx.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = p * (g - dot) / tau;
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Log(a) => {
                    let dx = dy.zip_map(self.value(*a), "log", |g, x| g / x)?;
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Exp(a) => {
                    let dx = dy.zip_map(y, "exp", |g, e| g * e)?;
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Normalize(a, rho) => {
                    let x = self.value(*a);
                    let mut dx = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let xr = x.row_slice(r);
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let c = floor_factor(norm, *rho);
                        let gr = dy.row_slice(r);
                        let ug: f64 = xr.iter().zip(gr).map(|(v, g)| v * g).sum::<f64>() / norm;
                        for ((o, v), g) in dx.row_slice_mut(r).iter_mut().zip(xr).zip(gr) {
                            *o = c / norm * (g - v / norm * ug);
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::RowDot(a, b) => {
                    let (xa, xb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let mut da = xb.clone();
                        for r in 0..da.rows() {
                            let g = dy.values()[r];
                            da.row_slice_mut(r).iter_mut().for_each(|v| *v *= g);
                        }
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.needs(*b) {
                        let mut db = xa.clone();
                        for r in 0..db.rows() {
                            let g = dy.values()[r];
                            db.row_slice_mut(r).iter_mut().for_each(|v| *v *= g);
                        }
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).dims();
                    accumulate(&mut grads, *a, Tensor::filled(r, c, dy.item()))?;
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let (r, c) = x.dims();
                    let g = dy.item() / x.len().max(1) as f64;
                    accumulate(&mut grads, *a, Tensor::filled(r, c, g))?;
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.value(*a).dims();
                    let mut dx = Tensor::zeros(r, c);
                    for k in 0..r {
                        for (o, g) in dx.row_slice_mut(k).iter_mut().zip(dy.values()) {
                            *o = g / r as f64;
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Prelu(a, slope) => {
                    let x = self.value(*a);
                    let s = self.value(*slope).item();
                    if self.needs(*a) {
                        let dx = dy.zip_map(x, "prelu", |g, v| if v > 0.0 { g } else { s * g })?;
                        accumulate(&mut grads, *a, dx)?;
                    }
                    if self.needs(*slope) {
                        let ds: f64 = dy
                            .values()
                            .iter()
                            .zip(x.values())
                            .filter(|(_, &v)| v <= 0.0)
                            .map(|(g, v)| g * v)
                            .sum();
                        accumulate(&mut grads, *slope, Tensor::scalar(ds))?;
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, dy.transpose())?;
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).dims();
                    accumulate(&mut grads, *a, dy.reshaped(r, c)?)?;
                }
                Op::Gather(a, idx) => {
                    let (r, c) = self.value(*a).dims();
                    let mut dx = Tensor::zeros(r, c);
                    for (k, &src) in idx.iter().enumerate() {
                        for (o, g) in dx.row_slice_mut(src).iter_mut().zip(dy.row_slice(k)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::ScatterAdd(a, idx) => {
                    accumulate(&mut grads, *a, dy.select_rows(idx))?;
                }
            }
        }

        let mut out = Gradients::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                match out.get_mut(name) {
                    Some(existing) => existing.add_assign(&g)?,
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
