use super::kernels::{gelu, log_sum_exp, matmul_acc, matmul_nt_acc, softplus};
use super::tape::{Mask, Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Variance guard inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.cols() != bv.cols() {
            return Err(Error::dim(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        if rv.len() != n {
            return Err(Error::dim("add_row", av.shape(), rv.shape()));
        }
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (d, &r) in chunk.iter_mut().zip(rv.data()) {
                *d += r;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    /// Row-wise softmax, stabilised by subtracting the row max.
    ///
    /// Masked entries get zero weight; a row with no allowed entry is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(mk) = mask {
            if mk.rows() != m || mk.cols() != n {
                return Err(Error::dim("softmax mask", &[m, n], &[mk.rows(), mk.cols()]));
            }
        }
        let x = self.value(a).data();
        let mut y = vec![S::zero(); m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let allowed = |j: usize| mask.is_none_or(|mk| mk.row(r)[j]);
            let mut max = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == S::neg_infinity() {
                continue;
            }
            let mut sum = S::zero();
            for j in 0..n {
                if allowed(j) {
                    let e = (row[j] - max).exp();
                    y[r * n + j] = e;
                    sum += e;
                }
            }
            for v in &mut y[r * n..(r + 1) * n] {
                *v /= sum;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), y)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Per-row standardisation followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = S::lit(LAYER_NORM_EPS);
        let inv_n = S::one() / S::lit(n as f64);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![S::zero(); m * n];
        let mut rstd = vec![S::zero(); m];
        let mut y = vec![S::zero(); m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                y[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), y)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n {
            return Err(Error::Index { what: "columns", index: start + len, len: n });
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&x[r * n + start..r * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], data)?;
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > m {
            return Err(Error::Index { what: "rows", index: start + len, len: m });
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(vec![len, n], data)?;
        Ok(self.push(t, Op::SliceRows(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map_or(0, |&p| self.dims(p).0);
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::dim("concat_cols", &[m], &[pm]));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map_or(0, |&p| self.dims(p).1);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::dim("concat_rows", &[n], &[pn]));
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(Error::Index { what: "rows", index: i, len: m });
            }
            data.extend_from_slice(self.value(a).row(i));
        }
        let t = Tensor::new(vec![index.len(), n], data)?;
        Ok(self.push(t, Op::GatherRows(a, index.to_vec()), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of all entries; an empty tensor has mean zero.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: S = v.data().iter().copied().sum();
        let m = s / S::lit(v.len().max(1) as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Column means, `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a).data();
        let inv = S::one() / S::lit(m.max(1) as f64);
        let mut out = vec![S::zero(); n];
        for r in 0..m {
            for j in 0..n {
                out[j] += x[r * n + j];
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::new(vec![1, n], out).expect("shape"), Op::MeanRows(a), &[a])
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", &[m, n], &[targets.len()]));
        }
        let x = self.value(logits).data();
        let mut probs = vec![S::zero(); m * n];
        let mut total = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::Index { what: "class", index: t, len: n });
            }
            let row = &x[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            total += lse - row[t];
            for j in 0..n {
                probs[r * n + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / S::lit(m.max(1) as f64);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    /// `-log softmax(z)[class_index]` for a single logit vector.
    pub fn cross_entropy_with_logits(&mut self, z: Var, class_index: usize) -> Result<Var> {
        let n = self.value(z).len();
        if class_index >= n {
            return Err(Error::Index { what: "class", index: class_index, len: n });
        }
        if self.value(z).rows() != 1 {
            return Err(Error::dim("cross_entropy_with_logits", self.shape(z), &[n]));
        }
        self.cross_entropy(z, &[class_index])
    }

    /// Mean binary cross-entropy of logits `z` against `{0,1}` targets `y`.
    pub fn bce_with_logits(&mut self, z: Var, y: &[S]) -> Result<Var> {
        let zv = self.value(z).data();
        if zv.len() != y.len() {
            return Err(Error::dim("bce_with_logits", self.shape(z), &[y.len()]));
        }
        // -[y ln s(z) + (1-y) ln(1-s(z))] = softplus(z) - y z
        let total: S = zv.iter().zip(y).map(|(&zi, &yi)| softplus(zi) - yi * zi).sum();
        let loss = total / S::lit(y.len().max(1) as f64);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { z, y: y.to_vec() }, &[z]))
    }

    /// Multi-head scaled dot-product attention over already-projected inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&Mask>, heads: usize) -> Result<Var> {
        let ((lq, d), (lk, dk), (lv, dv)) = (self.dims(q), self.dims(k), self.dims(v));
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if dk != d || dv != d || lk != lv {
            return Err(Error::dim("attention", &[lk, dk], &[lv, dv]));
        }
        if let Some(mk) = mask {
            if mk.rows() != lq || mk.cols() != lk {
                return Err(Error::dim("attention mask", &[lq, lk], &[mk.rows(), mk.cols()]));
            }
        }
        let dh = d / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (self.slice_cols(q, h * dh, dh)?, self.slice_cols(k, h * dh, dh)?, self.slice_cols(v, h * dh, dh)?)
            };
            let s = self.matmul_nt(qh, kh)?;
            let s = self.scale(s, scale);
            let p = self.softmax_rows(s, mask)?;
            outs.push(self.matmul(p, vh)?);
        }
        if heads == 1 {
            Ok(outs[0])
        } else {
            self.concat_cols(&outs)
        }
    }
}
