//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and `backward` walks it in reverse exactly once.
//! Leaves may borrow their data from long-lived [`Tensor`]s (frozen weights,
//! adapter parameters) to avoid copying them into every per-sample graph.

use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{axpy, dot, matmul, matmul_bt};
use super::tensor::{Tensor, TensorId};
use crate::error::{Error, Result};

/// Label value excluded from the language-modeling loss.
pub const IGNORE_INDEX: i64 = -100;

/// Probability floor applied before taking logarithms in [`Graph::kl_rows`].
pub const KL_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Softmax { x: Var, temperature: f64 },
    RmsNorm { x: Var, eps: f64 },
    ScaleCols(Var, Var),
    ScaleRows(Var, Var),
    NormalizeRows { x: Var, eps: f64 },
    GatherRows { x: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    AddRowMasked { x: Var, row: Var, mask: Vec<bool> },
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<i64>, count: usize },
    KlRows { p: Var, q: Var },
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
    detached: bool,
}

/// Result of [`Graph::masked_cross_entropy`] and similar masked reductions.
#[derive(Debug, Clone, Copy)]
pub struct MaskedLoss {
    pub loss: Var,
    /// Number of positions that contributed to the mean.
    pub count: usize,
}

impl MaskedLoss {
    /// True when every position was masked out and the loss is a constant 0.
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    bound: HashMap<TensorId, Var>,
}

/// Gradients produced by [`Graph::backward`]; owns its buffers so it outlives the graph.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: HashMap<TensorId, usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a tensor bound with [`Graph::tensor`].
    pub fn for_tensor(&self, t: &Tensor) -> Option<&[f64]> {
        self.params.get(&t.id()).and_then(|&i| self.by_node[i].as_deref())
    }

    /// Adds this gradient into `t`'s grad buffer. Returns whether anything was added.
    pub fn accumulate_into(&self, t: &mut Tensor) -> Result<bool> {
        match self.params.get(&t.id()).and_then(|&i| self.by_node[i].as_deref()) {
            Some(g) => {
                t.accumulate_grad(g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if let Some(x) = data.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric { op, detail: format!("non-finite input value {x}") });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `row / temperature` restricted to the first `active` entries; the rest are 0.
fn softmax_into(row: &[f64], temperature: f64, active: usize, out: &mut [f64]) {
    let max = row[..active].iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut total = 0.0;
    for (o, &x) in out[..active].iter_mut().zip(&row[..active]) {
        *o = ((x - max) / temperature).exp();
        total += *o;
    }
    for o in &mut out[..active] {
        *o /= total;
    }
    for o in &mut out[active..] {
        *o = 0.0;
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op, requires_grad, detached: false });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn is_detached(&self, v: Var) -> bool {
        self.nodes[v.0].detached
    }

    /// Binds a long-lived tensor as a leaf without copying it. Binding the same
    /// tensor twice returns the same node, so gradients from every use are summed.
    pub fn tensor(&mut self, t: &'a Tensor) -> Var {
        if let Some(&v) = self.bound.get(&t.id()) {
            return v;
        }
        let v = self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, t.requires_grad());
        self.bound.insert(t.id(), v);
        v
    }

    /// Owned leaf, optionally differentiable.
    pub fn input(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("input", shape, &[data.len()]));
        }
        Ok(self.push(Cow::Owned(data), shape.to_vec(), Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.input(shape, data, false)
    }

    /// Value-identical copy that blocks gradient flow to `x` and its ancestors.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let value = node.value.to_vec();
        let shape = node.shape.clone();
        let v = self.push(Cow::Owned(value), shape, Op::Leaf, false);
        self.nodes[v.0].detached = true;
        v
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape == nb.shape {
            let out = na.value.iter().zip(nb.value.iter()).map(|(&x, &y)| f(x, y)).collect();
            Ok((out, na.shape.clone()))
        } else if nb.value.len() == 1 {
            let y = nb.value[0];
            Ok((na.value.iter().map(|&x| f(x, y)).collect(), na.shape.clone()))
        } else if na.value.len() == 1 {
            let x = na.value[0];
            Ok((nb.value.iter().map(|&y| f(x, y)).collect(), nb.shape.clone()))
        } else {
            Err(Error::dim(op, &na.shape, &nb.shape))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), shape, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), shape, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, shape) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), shape, Op::Mul(a, b), rg))
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let node = &self.nodes[a.0];
        let out = node.value.iter().map(|x| x * c).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(Cow::Owned(out), shape, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let node = &self.nodes[a.0];
        let out = node.value.iter().map(|&x| f(x)).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(Cow::Owned(out), shape, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[])),
        }
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", &[m, k], &[k2, n]));
        }
        let out = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout of a linear layer with weight `b`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul_bt", a)?;
        let (n, k2) = self.matrix("matmul_bt", b)?;
        if k != k2 {
            return Err(Error::dim("matmul_bt", &[m, k], &[n, k2]));
        }
        let out = matmul_bt(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMulBt(a, b), rg))
    }

    fn softmax_impl(&mut self, x: Var, temperature: f64, causal: bool) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Usage(format!("softmax temperature must be positive, got {temperature}")));
        }
        let node = &self.nodes[x.0];
        check_finite("softmax_rows", &node.value)?;
        let (rows, cols) = rows_cols(&node.shape);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let active = if causal { (i + 1).min(cols) } else { cols };
            softmax_into(
                &node.value[i * cols..(i + 1) * cols],
                temperature,
                active,
                &mut out[i * cols..(i + 1) * cols],
            );
        }
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax { x, temperature }, rg))
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        self.softmax_impl(x, temperature, false)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; masked entries are exactly 0.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, 1.0, true)
    }

    /// Parameter-free RMS normalization of each row: `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let node = &self.nodes[x.0];
        let (rows, cols) = rows_cols(&node.shape);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = &node.value[i * cols..(i + 1) * cols];
            let inv = 1.0 / (dot(r, r) / cols as f64 + eps).sqrt();
            for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(r) {
                *o = v * inv;
            }
        }
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(Cow::Owned(out), shape, Op::RmsNorm { x, eps }, rg)
    }

    /// `y[i,j] = x[i,j] * g[j]`
    pub fn scale_cols(&mut self, x: Var, g: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(&self.nodes[x.0].shape);
        if self.nodes[g.0].value.len() != cols {
            return Err(Error::dim("scale_cols", &self.nodes[x.0].shape, &self.nodes[g.0].shape));
        }
        let (xv, gv) = (&self.nodes[x.0].value, &self.nodes[g.0].value);
        let mut out = xv.to_vec();
        for i in 0..rows {
            for (o, s) in out[i * cols..(i + 1) * cols].iter_mut().zip(gv.iter()) {
                *o *= s;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(Cow::Owned(out), shape, Op::ScaleCols(x, g), rg))
    }

    /// `y[i,j] = x[i,j] * v[i]`
    pub fn scale_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(&self.nodes[x.0].shape);
        if self.nodes[v.0].value.len() != rows {
            return Err(Error::dim("scale_rows", &self.nodes[x.0].shape, &self.nodes[v.0].shape));
        }
        let (xv, vv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        let mut out = xv.to_vec();
        for i in 0..rows {
            let s = vv[i];
            out[i * cols..(i + 1) * cols].iter_mut().for_each(|o| *o *= s);
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(Cow::Owned(out), shape, Op::ScaleRows(x, v), rg))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let node = &self.nodes[x.0];
        let (rows, cols) = rows_cols(&node.shape);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = &node.value[i * cols..(i + 1) * cols];
            let n = dot(r, r).sqrt().max(eps);
            for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(r) {
                *o = v / n;
            }
        }
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(Cow::Owned(out), shape, Op::NormalizeRows { x, eps }, rg)
    }

    /// Selects rows of a matrix; also serves as the embedding lookup.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let node = &self.nodes[x.0];
        let (r, cols) = rows_cols(&node.shape);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &i in rows {
            if i >= r {
                return Err(Error::Data(format!("row index {i} out of range for {r} rows")));
            }
            out.extend_from_slice(&node.value[i * cols..(i + 1) * cols]);
        }
        let rg = node.requires_grad;
        Ok(self.push(Cow::Owned(out), vec![rows.len(), cols], Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let node = &self.nodes[x.0];
        let (rows, cols) = rows_cols(&node.shape);
        if start + len > cols {
            return Err(Error::dim("slice_cols", &node.shape, &[start, len]));
        }
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&node.value[i * cols + start..i * cols + start + len]);
        }
        let rg = node.requires_grad;
        Ok(self.push(Cow::Owned(out), vec![rows, len], Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let (rows, _) = rows_cols(&self.nodes[first.0].shape);
        let mut total = 0;
        for &p in parts {
            let (r, c) = rows_cols(&self.nodes[p.0].shape);
            if r != rows {
                return Err(Error::dim("concat_cols", &self.nodes[first.0].shape, &self.nodes[p.0].shape));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let (_, c) = rows_cols(&self.nodes[p.0].shape);
                out.extend_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(out), vec![rows, total], Op::ConcatCols(parts.to_vec()), rg))
    }

    /// `y[i] = x[i] + row` where `mask[i]`, else `x[i]` unchanged.
    pub fn add_row_masked(&mut self, x: Var, row: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = rows_cols(&self.nodes[x.0].shape);
        if self.nodes[row.0].value.len() != cols || mask.len() != rows {
            return Err(Error::dim(
                "add_row_masked",
                &self.nodes[x.0].shape,
                &[mask.len(), self.nodes[row.0].value.len()],
            ));
        }
        let mut out = self.nodes[x.0].value.to_vec();
        let rv = &self.nodes[row.0].value;
        for (i, &m) in mask.iter().enumerate() {
            if m {
                for (o, r) in out[i * cols..(i + 1) * cols].iter_mut().zip(rv.iter()) {
                    *o += r;
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Cow::Owned(out), shape, Op::AddRowMasked { x, row, mask: mask.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let node = &self.nodes[x.0];
        if shape.iter().product::<usize>() != node.value.len() {
            return Err(Error::dim("reshape", &node.shape, shape));
        }
        let value = node.value.to_vec();
        let rg = node.requires_grad;
        Ok(self.push(Cow::Owned(value), shape.to_vec(), Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let s = node.value.iter().sum();
        let rg = node.requires_grad;
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean negative log-likelihood over positions whose label is not [`IGNORE_INDEX`].
    /// `labels[t]` is the target for `logits[t]`. An all-ignored row yields a constant 0.
    pub fn masked_cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<MaskedLoss> {
        let node = &self.nodes[logits.0];
        let (rows, vocab) = rows_cols(&node.shape);
        if labels.len() != rows {
            return Err(Error::dim("masked_cross_entropy", &node.shape, &[labels.len()]));
        }
        let mut total = 0.0;
        let mut count = 0;
        for (t, &y) in labels.iter().enumerate() {
            if y == IGNORE_INDEX {
                continue;
            }
            if y < 0 || y as usize >= vocab {
                return Err(Error::Data(format!("label {y} at position {t} outside [0, {vocab})")));
            }
            let row = &node.value[t * vocab..(t + 1) * vocab];
            check_finite("masked_cross_entropy", row)?;
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y as usize];
            count += 1;
        }
        if count == 0 {
            let loss = self.constant(&[1], vec![0.0])?;
            return Ok(MaskedLoss { loss, count });
        }
        let rg = node.requires_grad;
        let loss = self.push(
            Cow::Owned(vec![total / count as f64]),
            vec![1],
            Op::CrossEntropy { logits, labels: labels.to_vec(), count },
            rg,
        );
        Ok(MaskedLoss { loss, count })
    }

    /// Per-row `KL(p ‖ q) = Σ p (ln p − ln q)`, with `0·ln 0 = 0` and both
    /// probabilities floored at [`KL_EPS`] inside the logarithms.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let (np, nq) = (&self.nodes[p.0], &self.nodes[q.0]);
        if np.shape != nq.shape {
            return Err(Error::dim("kl_rows", &np.shape, &nq.shape));
        }
        let (rows, cols) = rows_cols(&np.shape);
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let (pr, qr) = (&np.value[i * cols..(i + 1) * cols], &nq.value[i * cols..(i + 1) * cols]);
            out[i] = pr
                .iter()
                .zip(qr)
                .filter(|(&pi, _)| pi > 0.0)
                .map(|(&pi, &qi)| pi * (pi.max(KL_EPS).ln() - qi.max(KL_EPS).ln()))
                .sum();
        }
        let rg = np.requires_grad || nq.requires_grad;
        Ok(self.push(Cow::Owned(out), vec![rows], Op::KlRows { p, q }, rg))
    }

    /// Reverse-mode sweep from a scalar, finite `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", node.shape)));
        }
        if !node.value[0].is_finite() {
            return Err(Error::Numeric { op: "backward", detail: format!("loss is {}", node.value[0]) });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let n = &self.nodes[i];
            if !n.requires_grad || matches!(n.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.bound.iter().filter(|(_, v)| v.0 <= loss.0).map(|(id, v)| (*id, v.0)).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { by_node: grads, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn binary_grad(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        other: Var,
        g: &[f64],
        df: impl Fn(f64, f64) -> f64,
    ) {
        // df(target_value, other_value) is ∂out/∂target for one element.
        let tn = &self.nodes[target.0];
        let on = &self.nodes[other.0];
        let Some(buf) = self.acc(grads, target) else { return };
        if tn.value.len() == g.len() {
            if on.value.len() == g.len() {
                for k in 0..g.len() {
                    buf[k] += g[k] * df(tn.value[k], on.value[k]);
                }
            } else {
                let o = on.value[0];
                for k in 0..g.len() {
                    buf[k] += g[k] * df(tn.value[k], o);
                }
            }
        } else {
            let t = tn.value[0];
            let mut s = 0.0;
            for k in 0..g.len() {
                let o = if on.value.len() == g.len() { on.value[k] } else { on.value[0] };
                s += g[k] * df(t, o);
            }
            buf[0] += s;
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.binary_grad(grads, *a, *b, g, |_, _| 1.0);
                self.binary_grad(grads, *b, *a, g, |_, _| 1.0);
            }
            Op::Sub(a, b) => {
                self.binary_grad(grads, *a, *b, g, |_, _| 1.0);
                self.binary_grad(grads, *b, *a, g, |_, _| -1.0);
            }
            Op::Mul(a, b) => {
                self.binary_grad(grads, *a, *b, g, |_, o| o);
                self.binary_grad(grads, *b, *a, g, |_, o| o);
            }
            Op::Scale(a, c) => {
                if let Some(buf) = self.acc(grads, *a) {
                    axpy(buf, *c, g);
                }
            }
            Op::Tanh(a) => {
                if let Some(buf) = self.acc(grads, *a) {
                    for ((b, &gi), &y) in buf.iter_mut().zip(g).zip(node.value.iter()) {
                        *b += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(buf) = self.acc(grads, *a) {
                    for ((b, &gi), &y) in buf.iter_mut().zip(g).zip(node.value.iter()) {
                        *b += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Silu(a) => {
                let xv = &self.nodes[a.0].value;
                if let Some(buf) = self.acc(grads, *a) {
                    for ((b, &gi), &x) in buf.iter_mut().zip(g).zip(xv.iter()) {
                        let s = sigmoid(x);
                        *b += gi * (s + x * s * (1.0 - s));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&self.nodes[a.0].shape);
                let n = node.shape[1];
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(buf) = self.acc(grads, *a) {
                    // ga[i,p] += Σ_j g[i,j] b[p,j]
                    for ii in 0..m {
                        let gi = &g[ii * n..(ii + 1) * n];
                        for p in 0..k {
                            buf[ii * k + p] += dot(gi, &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(buf) = self.acc(grads, *b) {
                    // gb[p,:] += Σ_i a[i,p] g[i,:]
                    for ii in 0..m {
                        let gi = &g[ii * n..(ii + 1) * n];
                        for p in 0..k {
                            let aip = av[ii * k + p];
                            if aip != 0.0 {
                                axpy(&mut buf[p * n..(p + 1) * n], aip, gi);
                            }
                        }
                    }
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = rows_cols(&self.nodes[a.0].shape);
                let n = node.shape[1];
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(buf) = self.acc(grads, *a) {
                    // ga[i,:] += Σ_j g[i,j] b[j,:]
                    for ii in 0..m {
                        for j in 0..n {
                            let gij = g[ii * n + j];
                            if gij != 0.0 {
                                axpy(&mut buf[ii * k..(ii + 1) * k], gij, &bv[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
                if let Some(buf) = self.acc(grads, *b) {
                    // gb[j,:] += Σ_i g[i,j] a[i,:]
                    for ii in 0..m {
                        for j in 0..n {
                            let gij = g[ii * n + j];
                            if gij != 0.0 {
                                axpy(&mut buf[j * k..(j + 1) * k], gij, &av[ii * k..(ii + 1) * k]);
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, temperature, .. } => {
                let (rows, cols) = rows_cols(&node.shape);
                if let Some(buf) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let y = &node.value[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inner = dot(gr, y);
                        for c in 0..cols {
                            buf[r * cols + c] += y[c] * (gr[c] - inner) / temperature;
                        }
                    }
                }
            }
            Op::RmsNorm { x, eps } => {
                let (rows, cols) = rows_cols(&node.shape);
                let xv = &self.nodes[x.0].value;
                if let Some(buf) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let xr = &xv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inv = 1.0 / (dot(xr, xr) / cols as f64 + eps).sqrt();
                        let coef = inv * inv * inv * dot(gr, xr) / cols as f64;
                        for c in 0..cols {
                            buf[r * cols + c] += inv * gr[c] - coef * xr[c];
                        }
                    }
                }
            }
            Op::ScaleCols(x, s) => {
                let (rows, cols) = rows_cols(&node.shape);
                let (xv, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
                if let Some(buf) = self.acc(grads, *x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[r * cols + c] += g[r * cols + c] * sv[c];
                        }
                    }
                }
                if let Some(buf) = self.acc(grads, *s) {
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[c] += g[r * cols + c] * xv[r * cols + c];
                        }
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let (rows, cols) = rows_cols(&node.shape);
                let (xv, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
                if let Some(buf) = self.acc(grads, *x) {
                    for r in 0..rows {
                        axpy(&mut buf[r * cols..(r + 1) * cols], sv[r], &g[r * cols..(r + 1) * cols]);
                    }
                }
                if let Some(buf) = self.acc(grads, *s) {
                    for r in 0..rows {
                        buf[r] += dot(&g[r * cols..(r + 1) * cols], &xv[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::NormalizeRows { x, eps } => {
                let (rows, cols) = rows_cols(&node.shape);
                let xv = &self.nodes[x.0].value;
                if let Some(buf) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let xr = &xv[r * cols..(r + 1) * cols];
                        let yr = &node.value[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let norm = dot(xr, xr).sqrt();
                        let b = &mut buf[r * cols..(r + 1) * cols];
                        if norm >= *eps {
                            let proj = dot(yr, gr);
                            for c in 0..cols {
                                b[c] += (gr[c] - yr[c] * proj) / norm;
                            }
                        } else {
                            axpy(b, 1.0 / eps, gr);
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let (_, cols) = rows_cols(&self.nodes[x.0].shape);
                if let Some(buf) = self.acc(grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        axpy(&mut buf[r * cols..(r + 1) * cols], 1.0, &g[k * cols..(k + 1) * cols]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = rows_cols(&node.shape);
                let (_, cols) = rows_cols(&self.nodes[x.0].shape);
                if let Some(buf) = self.acc(grads, *x) {
                    for r in 0..rows {
                        axpy(&mut buf[r * cols + start..r * cols + start + len], 1.0, &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = rows_cols(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = rows_cols(&self.nodes[p.0].shape);
                    if let Some(buf) = self.acc(grads, p) {
                        for r in 0..rows {
                            axpy(&mut buf[r * c..(r + 1) * c], 1.0, &g[r * total + offset..r * total + offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::AddRowMasked { x, row, mask } => {
                let (_, cols) = rows_cols(&node.shape);
                if let Some(buf) = self.acc(grads, *x) {
                    axpy(buf, 1.0, g);
                }
                if let Some(buf) = self.acc(grads, *row) {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            axpy(buf, 1.0, &g[r * cols..(r + 1) * cols]);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(buf) = self.acc(grads, *x) {
                    axpy(buf, 1.0, g);
                }
            }
            Op::Sum(x) => {
                if let Some(buf) = self.acc(grads, *x) {
                    buf.iter_mut().for_each(|b| *b += g[0]);
                }
            }
            Op::CrossEntropy { logits, labels, count } => {
                let (_, vocab) = rows_cols(&self.nodes[logits.0].shape);
                let lv = &self.nodes[logits.0].value;
                let scale = g[0] / *count as f64;
                if let Some(buf) = self.acc(grads, *logits) {
                    let mut probs = vec![0.0; vocab];
                    for (t, &y) in labels.iter().enumerate() {
                        if y == IGNORE_INDEX {
                            continue;
                        }
                        softmax_into(&lv[t * vocab..(t + 1) * vocab], 1.0, vocab, &mut probs);
                        probs[y as usize] -= 1.0;
                        axpy(&mut buf[t * vocab..(t + 1) * vocab], scale, &probs);
                    }
                }
            }
            Op::KlRows { p, q } => {
                let (rows, cols) = rows_cols(&self.nodes[p.0].shape);
                let (pv, qv) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
                if let Some(buf) = self.acc(grads, *p) {
                    for r in 0..rows {
                        for c in 0..cols {
                            let k = r * cols + c;
                            let (pi, qi) = (pv[k], qv[k]);
                            let d = if pi >= KL_EPS {
                                pi.ln() + 1.0 - qi.max(KL_EPS).ln()
                            } else {
                                KL_EPS.ln() - qi.max(KL_EPS).ln()
                            };
                            buf[k] += g[r] * d;
                        }
                    }
                }
                if let Some(buf) = self.acc(grads, *q) {
                    for r in 0..rows {
                        for c in 0..cols {
                            let k = r * cols + c;
                            let (pi, qi) = (pv[k], qv[k]);
                            if pi > 0.0 && qi >= KL_EPS {
                                buf[k] -= g[r] * pi / qi;
                            }
                        }
                    }
                }
            }
        }
    }
}
