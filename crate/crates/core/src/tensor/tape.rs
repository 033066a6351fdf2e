use super::kernels::{gelu_grad, matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention mask; `true` marks an allowed query/key pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::dim("mask", &[rows, cols], &[allow.len()]));
        }
        Ok(Mask { rows, cols, allow })
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allow[i * n + j] = true;
            }
        }
        Mask { rows: n, cols: n, allow }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub(crate) fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.cols..(i + 1) * self.cols]
    }
}

pub(crate) enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    Bce { z: Var, y: Vec<S> },
}

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<S>>,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// Single-writer: a tape and its values belong to one forward/backward pass.
pub struct Tape<S> {
    pub(crate) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Only leaves with `requires_grad` collect gradients.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`, accumulating into every reachable
    /// node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &mut |da| matmul_nt_acc(g, bv.data(), da, m, n, k));
                acc(*b, &mut |db| matmul_tn_acc(av.data(), g, db, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                acc(*a, &mut |da| matmul_acc(g, bv.data(), da, m, n, k));
                acc(*b, &mut |db| matmul_tn_acc(g, av.data(), db, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |da| add_into(da, g));
                let n = out.cols();
                acc(*row, &mut |dr| {
                    for chunk in g.chunks(n.max(1)) {
                        add_into(dr, chunk);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *c));
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |da| {
                    for ((d, &x), &gi) in da.iter_mut().zip(av).zip(g) {
                        *d += gi * gelu_grad(x);
                    }
                });
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let y = out.data();
                acc(*a, &mut |da| {
                    for r in 0..out.rows() {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            da[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = out.cols();
                let rows = out.rows();
                let gv = self.value(*gain).data();
                acc(*x, &mut |dx| {
                    let inv_n = S::one() / S::lit(n as f64);
                    for r in 0..rows {
                        let (gr, xr) = (&g[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xr[j];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            dx[r * n + j] += rstd[r] * (d - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for chunk in g.chunks(n.max(1)) {
                        add_into(db, chunk);
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let src_cols = self.value(*a).cols();
                let n = out.cols();
                acc(*a, &mut |da| {
                    for r in 0..out.rows() {
                        add_into(&mut da[r * src_cols + start..r * src_cols + start + n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let n = out.cols();
                acc(*a, &mut |da| add_into(&mut da[start * n..start * n + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    acc(*p, &mut |dp| {
                        for r in 0..out.rows() {
                            add_into(&mut dp[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    acc(*p, &mut |dp| add_into(dp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::GatherRows(a, index) => {
                let n = out.cols();
                acc(*a, &mut |da| {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut da[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let s = g[0] / S::lit(len.max(1) as f64);
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += s));
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let (rows, n) = (av.rows(), av.cols());
                let inv = S::one() / S::lit(rows.max(1) as f64);
                acc(*a, &mut |da| {
                    for r in 0..rows {
                        for j in 0..n {
                            da[r * n + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = self.value(*logits).cols();
                let scale = g[0] / S::lit(targets.len().max(1) as f64);
                acc(*logits, &mut |dz| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { S::one() } else { S::zero() };
                            dz[r * n + j] += scale * (probs[r * n + j] - onehot);
                        }
                    }
                });
            }
            Op::Bce { z, y } => {
                let zv = self.value(*z).data();
                let scale = g[0] / S::lit(y.len().max(1) as f64);
                acc(*z, &mut |dz| {
                    for ((d, &zi), &yi) in dz.iter_mut().zip(zv).zip(y) {
                        *d += scale * (sigmoid(zi) - yi);
                    }
                });
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn unreachable_and_constant_leaves_untouched() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let unused = tape.param(Tensor::vector(vec![5.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![2.0]));
        let a = tape.scale(x, 3.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }
}
