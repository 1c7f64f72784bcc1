use std::sync::Arc;

use super::kernels::{self, gemm, gemm_nt, gemm_tn};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Logit offset applied to masked attention positions. Large and finite so that
/// masked probabilities underflow to exactly zero without producing NaNs.
pub const MASK_NEG: f64 = -1e9;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean visibility matrix, `allowed[i * cols + j]` says query `i` may see key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape("mask", &[rows, cols], &[allowed.len()]));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.allowed[i * self.cols..(i + 1) * self.cols]
            .iter()
            .filter(|&&a| a)
            .count()
    }

    /// Fails when some query row has no visible key.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.rows {
            if self.row_count(i) == 0 {
                return Err(Error::Config(format!(
                    "attention mask row {i} is fully masked"
                )));
            }
        }
        Ok(())
    }
}

/// Deliberate corruptions of backward rules, used as negative controls for the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SoftmaxBackward,
    AttentionBackward,
    LayerNormBackward,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Offset(Var),
    Sum(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<S>,
    },
    Norm(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<S>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Diag(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Dynamic reverse-mode graph. Nodes are appended in evaluation order, so
/// reverse index order is a valid topological order for backward traversal.
pub struct Graph<S: Real> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    fault: Option<Fault>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
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
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    // ---- arithmetic -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![S::zero(); n * m];
        gemm(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            k,
            m,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b), rg))
    }

    /// `x W (+ b)` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(t, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        if da != self.dims(b) {
            return Err(Error::shape(
                op,
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        Ok(da)
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let (r, c) = self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::matrix(r, c, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(b).len() != c {
            return Err(Error::shape(
                "add_row",
                self.value(x).shape(),
                self.value(b).shape(),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::matrix(r, c, out), Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn offset(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Offset(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, S::one() / S::of(n as f64))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.sqrt());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sqrt(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    // ---- normalizations -----------------------------------------------------

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = vec![S::zero(); r * c];
        for (src, dst) in self.value(x).data().chunks(c).zip(out.chunks_mut(c)) {
            kernels::softmax_row(src, dst);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, out), Op::Softmax(x), rg)
    }

    /// Softmax along `axis` (0: columns, 1: rows).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => Ok(self.softmax_rows(x)),
            0 => {
                let t = self.transpose(x);
                let s = self.softmax_rows(t);
                Ok(self.transpose(s))
            }
            _ => Err(Error::Config(format!("softmax axis {axis} out of range"))),
        }
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let lse = kernels::logsumexp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, out), Op::LogSoftmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape(
                "layer_norm",
                self.value(x).shape(),
                self.value(gain).shape(),
            ));
        }
        let n = S::of(c as f64);
        let mut xhat = vec![S::zero(); r * c];
        let mut inv_std = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * c];
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        for (i, row) in self.value(x).data().chunks(c).enumerate() {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::matrix(r, c, out),
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

    /// Scales each row to unit L2 norm; `eps` guards the zero row
    /// (norm computed as `sqrt(|x|^2 + eps^2)`).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: S) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        let mut norms = vec![S::zero(); r];
        for (i, row) in out.chunks_mut(c).enumerate() {
            let s: S = row.iter().map(|&v| v * v).sum();
            let n = (s + eps * eps).sqrt();
            norms[i] = n;
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::matrix(r, c, out),
            Op::L2NormalizeRows { x, norms },
            rg,
        )
    }

    /// Euclidean norm of the whole array, `sqrt(sum x^2 + eps^2)`.
    pub fn norm(&mut self, x: Var, eps: S) -> Var {
        let s: S = self.value(x).data().iter().map(|&v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar((s + eps * eps).sqrt()), Op::Norm(x), rg)
    }

    // ---- attention ----------------------------------------------------------

    /// Multi-head scaled dot-product attention over already projected
    /// queries `q [n_q x d]`, keys and values `[n_k x d]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &Arc<AttentionMask>,
        heads: usize,
    ) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        if dk != d || self.dims(v) != (nk, d) {
            return Err(Error::shape(
                "attention",
                self.value(q).shape(),
                self.value(k).shape(),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        if mask.rows() != nq || mask.cols() != nk {
            return Err(Error::shape(
                "attention mask",
                &[nq, nk],
                &[mask.rows(), mask.cols()],
            ));
        }
        mask.validate()?;
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let neg = S::of(MASK_NEG);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![S::zero(); heads * nq * nk];
        let mut out = vec![S::zero(); nq * d];
        let mut logits = vec![S::zero(); nk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..nk {
                    if !mask.allows(i, j) {
                        logits[j] = neg;
                        continue;
                    }
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let mut s = S::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        s += a * b;
                    }
                    logits[j] = s * scale;
                }
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                kernels::softmax_row(&logits, p);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == S::zero() {
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(nq, d, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities `[heads][n_q][n_k]` recorded by an attention node.
    pub fn attention_probs(&self, node: Var) -> Option<&[S]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---- structural -----------------------------------------------------------

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, _) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", self.value(x).shape(), &[bad]));
        }
        let t = self.value(x).select_rows(idx);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape("concat_rows", &[r, c], &[pr, pc]));
            }
            data.extend_from_slice(self.value(p).data());
            r += pr;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(r, c, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        let mut c = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::shape("concat_cols", &[r, c], &[pr, pc]));
            }
            c += pc;
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(r, c, data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start > end || end > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, end]));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.value(x).row(i)[start..end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(r, end - start, data),
            Op::SliceCols(x, start),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x).clone().reshape(vec![rows, cols])?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r != c {
            return Err(Error::shape("diag", &[r, c], &[r, r]));
        }
        let data = (0..r).map(|i| self.value(x).get(i, i)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(r, 1, data), Op::Diag(x), rg))
    }

    // ---- backward -------------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every differentiable leaf reachable
    /// from `loss`. Repeated calls accumulate until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward target must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Contract(
                "backward target does not depend on any differentiable leaf".into(),
            ));
        }
        let fault = self.fault;
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let mut adj: Vec<Option<Vec<S>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backward_node(nodes, node, id, g, &mut adj, grads, fault);
        }
        Ok(())
    }
}

/// Returns the adjoint buffer for `v`, creating it zeroed, or `None` when `v`
/// does not require a gradient.
fn slot<'a, S: Real>(
    nodes: &[Node<S>],
    adj: &'a mut [Option<Vec<S>>],
    v: Var,
) -> Option<&'a mut Vec<S>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![S::zero(); len]))
}

fn backward_node<S: Real>(
    nodes: &[Node<S>],
    node: &Node<S>,
    id: usize,
    g: Vec<S>,
    adj: &mut [Option<Vec<S>>],
    grads: &mut [Option<Tensor<S>>],
    fault: Option<Fault>,
) {
    let val = |v: Var| &nodes[v.0].value;
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {
            let shape = node.value.shape().to_vec();
            match &mut grads[id] {
                Some(acc) => {
                    for (a, &d) in acc.data_mut().iter_mut().zip(&g) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(Tensor::new(shape, g).expect("grad shape")),
            }
        }
        Op::MatMul(a, b) => {
            let (n, k) = val(*a).dims2();
            let m = val(*b).cols();
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(nodes, adj, *a) {
                gemm_nt(&g, bd, da, n, m, k);
            }
            if let Some(db) = slot(nodes, adj, *b) {
                gemm_tn(ad, &g, db, k, n, m);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = node.value.dims2();
            if let Some(da) = slot(nodes, adj, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(nodes, adj, *a) {
                add_into(da, &g);
            }
            if let Some(db) = slot(nodes, adj, *b) {
                add_into(db, &g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, adj, *a) {
                add_into(da, &g);
            }
            if let Some(db) = slot(nodes, adj, *b) {
                for (d, &gv) in db.iter_mut().zip(&g) {
                    *d -= gv;
                }
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(nodes, adj, *a) {
                for ((d, &gv), &bv) in da.iter_mut().zip(&g).zip(bd) {
                    *d += gv * bv;
                }
            }
            if let Some(db) = slot(nodes, adj, *b) {
                for ((d, &gv), &av) in db.iter_mut().zip(&g).zip(ad) {
                    *d += gv * av;
                }
            }
        }
        Op::AddRow(x, b) => {
            let c = node.value.cols();
            if let Some(dx) = slot(nodes, adj, *x) {
                add_into(dx, &g);
            }
            if let Some(db) = slot(nodes, adj, *b) {
                for row in g.chunks(c) {
                    add_into(db, row);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(dx) = slot(nodes, adj, *x) {
                for (d, &gv) in dx.iter_mut().zip(&g) {
                    *d += gv * *c;
                }
            }
        }
        Op::Offset(x) => {
            if let Some(dx) = slot(nodes, adj, *x) {
                add_into(dx, &g);
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, adj, *x) {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Sqrt(x) => {
            if let Some(dx) = slot(nodes, adj, *x) {
                for ((d, &gv), &yv) in dx.iter_mut().zip(&g).zip(y) {
                    *d += gv / (S::of(2.0) * yv);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(dx) = slot(nodes, adj, *x) {
                for ((d, &gv), &yv) in dx.iter_mut().zip(&g).zip(y) {
                    *d += gv * (S::one() - yv * yv);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = slot(nodes, adj, *x) {
                for ((d, &gv), &yv) in dx.iter_mut().zip(&g).zip(y) {
                    *d += gv * yv * (S::one() - yv);
                }
            }
        }
        Op::Gelu(x) => {
            let xd = val(*x).data();
            if let Some(dx) = slot(nodes, adj, *x) {
                for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(xd) {
                    *d += gv * kernels::gelu_grad(xv);
                }
            }
        }
        Op::Softmax(x) => {
            let c = node.value.cols();
            let corrupt = fault == Some(Fault::SoftmaxBackward);
            if let Some(dx) = slot(nodes, adj, *x) {
                for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: S = if corrupt {
                        S::zero()
                    } else {
                        grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum()
                    };
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let c = node.value.cols();
            if let Some(dx) = slot(nodes, adj, *x) {
                for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let gsum: S = grow.iter().copied().sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += gv - yv.exp() * gsum;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let c = node.value.cols();
            let gd = val(*gain).data();
            if let Some(dgain) = slot(nodes, adj, *gain) {
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dgain[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(dbias) = slot(nodes, adj, *bias) {
                for grow in g.chunks(c) {
                    add_into(dbias, grow);
                }
            }
            let corrupt = fault == Some(Fault::LayerNormBackward);
            if let Some(dx) = slot(nodes, adj, *x) {
                let n = S::of(c as f64);
                let mut dh = vec![S::zero(); c];
                for (i, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    for j in 0..c {
                        dh[j] = grow[j] * gd[j];
                    }
                    let sum_dh: S = dh.iter().copied().sum();
                    let sum_dh_h: S = if corrupt {
                        S::zero()
                    } else {
                        dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum()
                    };
                    let inv = inv_std[i];
                    for j in 0..c {
                        dx[i * c + j] += inv / n * (n * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
            }
        }
        Op::L2NormalizeRows { x, norms } => {
            let c = node.value.cols();
            if let Some(dx) = slot(nodes, adj, *x) {
                for (i, (grow, yrow)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                    let n = norms[i];
                    // y = x / n, so x / n^3 = y / n^2.
                    let xg: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<S>() * n;
                    for j in 0..c {
                        dx[i * c + j] += grow[j] / n - yrow[j] * xg / (n * n);
                    }
                }
            }
        }
        Op::Norm(x) => {
            let xd = val(*x).data();
            let n = y[0];
            if let Some(dx) = slot(nodes, adj, *x) {
                for (d, &xv) in dx.iter_mut().zip(xd) {
                    *d += g[0] * xv / n;
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => {
            let (nq, d) = val(*q).dims2();
            let nk = val(*k).rows();
            let dh = d / heads;
            let scale = S::one() / S::of(dh as f64).sqrt();
            let qd = val(*q).data();
            let kd = val(*k).data();
            let vd = val(*v).data();
            let corrupt = fault == Some(Fault::AttentionBackward);
            let mut dq = vec![S::zero(); nq * d];
            let mut dk = vec![S::zero(); nk * d];
            let mut dv = vec![S::zero(); nk * d];
            let mut dp = vec![S::zero(); nk];
            for h in 0..*heads {
                let off = h * dh;
                for i in 0..nq {
                    let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                    let gi = &g[i * d + off..i * d + off + dh];
                    let mut s = S::zero();
                    for j in 0..nk {
                        if p[j] == S::zero() {
                            dp[j] = S::zero();
                            continue;
                        }
                        let vj = &vd[j * d + off..j * d + off + dh];
                        let mut acc = S::zero();
                        for (&a, &b) in gi.iter().zip(vj) {
                            acc += a * b;
                        }
                        dp[j] = acc;
                        s += p[j] * acc;
                        let dvj = &mut dv[j * d + off..j * d + off + dh];
                        for (o, &gv) in dvj.iter_mut().zip(gi) {
                            *o += p[j] * gv;
                        }
                    }
                    if corrupt {
                        s = S::zero();
                    }
                    for j in 0..nk {
                        if p[j] == S::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        for c in 0..dh {
                            dq[i * d + off + c] += ds * kd[j * d + off + c];
                            dk[j * d + off + c] += ds * qd[i * d + off + c];
                        }
                    }
                }
            }
            if let Some(a) = slot(nodes, adj, *q) {
                add_into(a, &dq);
            }
            if let Some(a) = slot(nodes, adj, *k) {
                add_into(a, &dk);
            }
            if let Some(a) = slot(nodes, adj, *v) {
                add_into(a, &dv);
            }
        }
        Op::GatherRows(x, idx) => {
            let c = node.value.cols();
            if let Some(dx) = slot(nodes, adj, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut dx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                if let Some(dp) = slot(nodes, adj, p) {
                    add_into(dp, &g[off..off + len]);
                }
                off += len;
            }
        }
        Op::ConcatCols(parts) => {
            let (r, c) = node.value.dims2();
            let mut col = 0;
            for &p in parts {
                let pc = nodes[p.0].value.cols();
                if let Some(dp) = slot(nodes, adj, p) {
                    for i in 0..r {
                        add_into(
                            &mut dp[i * pc..(i + 1) * pc],
                            &g[i * c + col..i * c + col + pc],
                        );
                    }
                }
                col += pc;
            }
        }
        Op::SliceCols(x, start) => {
            let (r, w) = node.value.dims2();
            let c = nodes[x.0].value.cols();
            if let Some(dx) = slot(nodes, adj, *x) {
                for i in 0..r {
                    add_into(
                        &mut dx[i * c + start..i * c + start + w],
                        &g[i * w..(i + 1) * w],
                    );
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, adj, *x) {
                add_into(dx, &g);
            }
        }
        Op::Diag(x) => {
            let n = node.value.rows();
            if let Some(dx) = slot(nodes, adj, *x) {
                for i in 0..n {
                    dx[i * n + i] += g[i];
                }
            }
        }
    }
}

#[inline]
fn add_into<S: Real>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
