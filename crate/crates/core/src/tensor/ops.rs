//! Forward kernels and their adjoints.

use super::{Result, Tensor, TensorError};

pub(crate) enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    MulRow(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Concat { parts: Vec<Tensor>, axis: usize },
    Slice { x: Tensor, axis: usize, start: usize },
    Embedding { table: Tensor, ids: Vec<usize> },
    GatherCols { x: Tensor, index: Vec<usize> },
    Softmax(Tensor),
    LayerNorm { x: Tensor, inv_std: Vec<f64> },
    Relu(Tensor),
    Sigmoid(Tensor),
    Log(Tensor),
    Exp(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    MeanRows(Tensor),
    Dropout { x: Tensor, mask: Vec<f64> },
    StraightThrough(Tensor),
    CrossEntropy { logits: Tensor, probs: Vec<f64>, targets: Vec<Option<usize>> },
    BceLogits { score: Tensor, label: f64 },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) => vec![a, b],
            Scale(x, _) | AddScalar(x) | Transpose(x) | Reshape(x) | Softmax(x) | Relu(x) | Sigmoid(x) | Log(x)
            | Exp(x) | Sum(x) | Mean(x) | MeanRows(x) | StraightThrough(x) => vec![x],
            Concat { parts, .. } => parts.iter().collect(),
            Slice { x, .. } | GatherCols { x, .. } | LayerNorm { x, .. } | Dropout { x, .. } => vec![x],
            Embedding { table, .. } => vec![table],
            CrossEntropy { logits, .. } => vec![logits],
            BceLogits { score, .. } => vec![score],
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn require_rank2(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::ShapeMismatch { op, left: other.to_vec(), right: vec![] }),
    }
}

/// `(outer, len, inner)` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64, op: impl FnOnce(Tensor) -> Op) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(x.shape().to_vec(), data, op(x.clone()))
}

/// `c = a @ b` into a zeroed `m × n` buffer.
fn matmul_kernel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = require_rank2("matmul", self)?;
        let (k2, n) = require_rank2("matmul", other).map_err(|_| mismatch("matmul", self, other))?;
        if k != k2 {
            return Err(mismatch("matmul", self, other));
        }
        let mut out = vec![0.0; m * n];
        matmul_kernel(&self.data(), &other.data(), &mut out, m, k, n);
        Ok(Tensor::from_op(vec![m, n], out, Op::MatMul(self.clone(), other.clone())))
    }

    fn zip_same(&self, other: &Tensor, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape() != other.shape() {
            return Err(mismatch(name, self, other));
        }
        Ok(self.data().iter().zip(other.data().iter()).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let d = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(Tensor::from_op(self.shape().to_vec(), d, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let d = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(Tensor::from_op(self.shape().to_vec(), d, Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let d = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(Tensor::from_op(self.shape().to_vec(), d, Op::Mul(self.clone(), other.clone())))
    }

    fn check_row(&self, row: &Tensor, name: &'static str) -> Result<usize> {
        let n = self.cols();
        if row.numel() != n || row.shape().len() > 2 || (row.shape().len() == 2 && row.shape()[0] != 1) {
            return Err(mismatch(name, self, row));
        }
        Ok(n)
    }

    /// Adds a length-`n` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let n = self.check_row(row, "add_row")?;
        let r = row.data();
        let mut d = self.to_vec();
        d.chunks_mut(n).for_each(|c| c.iter_mut().zip(r.iter()).for_each(|(v, b)| *v += b));
        drop(r);
        Ok(Tensor::from_op(self.shape().to_vec(), d, Op::AddRow(self.clone(), row.clone())))
    }

    /// Multiplies every row of a `[.., n]` tensor by a length-`n` vector.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        let n = self.check_row(row, "mul_row")?;
        let r = row.data();
        let mut d = self.to_vec();
        d.chunks_mut(n).for_each(|c| c.iter_mut().zip(r.iter()).for_each(|(v, b)| *v *= b));
        drop(r);
        Ok(Tensor::from_op(self.shape().to_vec(), d, Op::MulRow(self.clone(), row.clone())))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        unary(self, |v| v * s, |x| Op::Scale(x, s))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        unary(self, |v| v + s, Op::AddScalar)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = require_rank2("transpose", self)?;
        let src = self.data();
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Ok(Tensor::from_op(vec![c, r], d, Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch { op: "reshape", left: self.shape().to_vec(), right: shape.to_vec() });
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape(self.clone())))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::ShapeMismatch { op: "concat", left: vec![], right: vec![] })?;
        if axis >= first.shape().len() {
            return Err(TensorError::ShapeMismatch { op: "concat", left: first.shape().to_vec(), right: vec![axis] });
        }
        let mut total = 0;
        for p in parts {
            let ok = p.shape().len() == first.shape().len()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !ok {
                return Err(mismatch("concat", first, p));
            }
            total += p.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut d = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                d.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_op(shape, d, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// The half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.shape().len() || start > end || end > self.shape()[axis] {
            return Err(TensorError::ShapeMismatch { op: "slice", left: self.shape().to_vec(), right: vec![axis, start, end] });
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut d = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            d.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        Ok(Tensor::from_op(shape, d, Op::Slice { x: self.clone(), axis, start }))
    }

    /// Rows of a `[V, d]` table selected by `ids`.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, dim) = require_rank2("embedding_lookup", self)?;
        let table = self.data();
        let mut d = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { op: "embedding_lookup", index: id, bound: v });
            }
            d.extend_from_slice(&table[id * dim..(id + 1) * dim]);
        }
        drop(table);
        Ok(Tensor::from_op(vec![ids.len(), dim], d, Op::Embedding { table: self.clone(), ids: ids.to_vec() }))
    }

    /// Output column `j` is input column `index[j]`.
    pub fn gather_cols(&self, index: &[usize]) -> Result<Tensor> {
        let (r, c) = require_rank2("gather_cols", self)?;
        if let Some(&bad) = index.iter().find(|&&j| j >= c) {
            return Err(TensorError::IndexOutOfRange { op: "gather_cols", index: bad, bound: c });
        }
        let src = self.data();
        let n = index.len();
        let mut d = vec![0.0; r * n];
        for i in 0..r {
            for (j, &s) in index.iter().enumerate() {
                d[i * n + j] = src[i * c + s];
            }
        }
        drop(src);
        Ok(Tensor::from_op(vec![r, n], d, Op::GatherCols { x: self.clone(), index: index.to_vec() }))
    }

    /// Softmax along `axis` (the last axis, or axis 0 of a matrix).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let rank = self.shape().len().max(1);
        if axis + 1 == rank {
            return Ok(self.softmax_rows());
        }
        if axis == 0 && rank == 2 {
            return self.transpose()?.softmax_rows().transpose();
        }
        Err(TensorError::ShapeMismatch { op: "softmax", left: self.shape().to_vec(), right: vec![axis] })
    }

    fn softmax_rows(&self) -> Tensor {
        let n = self.cols();
        let mut d = self.to_vec();
        for row in d.chunks_mut(n) {
            softmax_in_place(row);
        }
        Tensor::from_op(self.shape().to_vec(), d, Op::Softmax(self.clone()))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        let n = self.cols();
        let mut d = self.to_vec();
        let mut inv_std = Vec::with_capacity(self.rows());
        for row in d.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        Tensor::from_op(self.shape().to_vec(), d, Op::LayerNorm { x: self.clone(), inv_std })
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid, Op::Sigmoid)
    }

    pub fn log(&self) -> Tensor {
        unary(self, f64::ln, Op::Log)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, Op::Exp)
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s = self.data().iter().sum::<f64>() / self.numel().max(1) as f64;
        Tensor::from_op(vec![], vec![s], Op::Mean(self.clone()))
    }

    /// Column means of a `[r, c]` matrix as a `[1, c]` row.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (r, c) = require_rank2("mean_rows", self)?;
        let mut d = vec![0.0; c];
        for row in self.data().chunks(c) {
            d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        d.iter_mut().for_each(|v| *v /= r.max(1) as f64);
        Ok(Tensor::from_op(vec![1, c], d, Op::MeanRows(self.clone())))
    }

    /// Multiplies by a fixed mask (already scaled by the keep probability).
    pub fn dropout_with_mask(&self, mask: Vec<f64>) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(TensorError::ShapeMismatch { op: "dropout", left: self.shape().to_vec(), right: vec![mask.len()] });
        }
        let d = self.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), d, Op::Dropout { x: self.clone(), mask }))
    }

    /// Takes the values of `hard` and routes gradients to `soft` unchanged.
    pub fn straight_through(hard: &Tensor, soft: &Tensor) -> Result<Tensor> {
        if hard.shape() != soft.shape() {
            return Err(mismatch("straight_through", hard, soft));
        }
        Ok(Tensor::from_op(hard.shape().to_vec(), hard.to_vec(), Op::StraightThrough(soft.clone())))
    }

    pub(crate) fn from_loss(value: f64, op: Op) -> Tensor {
        Tensor::from_op(vec![], vec![value], op)
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Gradient contributions of `node`'s op to each parent, given `g = dL/dnode`.
pub(crate) fn backward(node: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
    use Op::*;
    let out = node.data();
    match &node.0.op {
        Leaf => vec![],
        MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut res = Vec::new();
            if a.requires_grad() {
                // dA = G Bᵀ, through an explicit transpose so the inner loop
                // is an axpy rather than a serial dot-product reduction
                let bd = b.data();
                let mut bt = vec![0.0; n * k];
                for p in 0..k {
                    for j in 0..n {
                        bt[j * k + p] = bd[p * n + j];
                    }
                }
                let mut da = vec![0.0; m * k];
                matmul_kernel(g, &bt, &mut da, m, n, k);
                res.push((a.clone(), da));
            }
            if b.requires_grad() {
                // dB = Aᵀ G
                let ad = a.data();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        db[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(d, x)| *d += av * x);
                    }
                }
                res.push((b.clone(), db));
            }
            res
        }
        Add(a, b) => vec![(a.clone(), g.to_vec()), (b.clone(), g.to_vec())],
        Sub(a, b) => vec![(a.clone(), g.to_vec()), (b.clone(), g.iter().map(|v| -v).collect())],
        Mul(a, b) => {
            let (ad, bd) = (a.data(), b.data());
            vec![
                (a.clone(), g.iter().zip(bd.iter()).map(|(x, y)| x * y).collect()),
                (b.clone(), g.iter().zip(ad.iter()).map(|(x, y)| x * y).collect()),
            ]
        }
        AddRow(x, row) => {
            let n = x.cols();
            let mut dr = vec![0.0; n];
            for chunk in g.chunks(n) {
                dr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
            }
            vec![(x.clone(), g.to_vec()), (row.clone(), dr)]
        }
        MulRow(x, row) => {
            let n = x.cols();
            let (xd, rd) = (x.data(), row.data());
            let mut dx = g.to_vec();
            dx.chunks_mut(n).for_each(|c| c.iter_mut().zip(rd.iter()).for_each(|(v, r)| *v *= r));
            let mut dr = vec![0.0; n];
            for (gc, xc) in g.chunks(n).zip(xd.chunks(n)) {
                dr.iter_mut().zip(gc.iter().zip(xc)).for_each(|(d, (g, x))| *d += g * x);
            }
            vec![(x.clone(), dx), (row.clone(), dr)]
        }
        Scale(x, s) => vec![(x.clone(), g.iter().map(|v| v * s).collect())],
        AddScalar(x) | Reshape(x) => vec![(x.clone(), g.to_vec())],
        Transpose(x) => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] = g[j * r + i];
                }
            }
            vec![(x.clone(), d)]
        }
        Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(node.shape(), *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for p in parts {
                let len = p.shape()[*axis];
                let mut d = Vec::with_capacity(p.numel());
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    d.extend_from_slice(&g[start..start + len * inner]);
                }
                offset += len;
                res.push((p.clone(), d));
            }
            res
        }
        Slice { x, axis, start } => {
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let width = node.shape()[*axis];
            let mut d = vec![0.0; x.numel()];
            for o in 0..outer {
                let dst = (o * len + start) * inner;
                d[dst..dst + width * inner].copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
            }
            vec![(x.clone(), d)]
        }
        Embedding { table, ids } => {
            let dim = table.shape()[1];
            let mut d = vec![0.0; table.numel()];
            for (row, &id) in ids.iter().enumerate() {
                d[id * dim..(id + 1) * dim].iter_mut().zip(&g[row * dim..(row + 1) * dim]).for_each(|(a, b)| *a += b);
            }
            vec![(table.clone(), d)]
        }
        GatherCols { x, index } => {
            let c = x.cols();
            let n = index.len();
            let mut d = vec![0.0; x.numel()];
            for i in 0..x.rows() {
                for (j, &s) in index.iter().enumerate() {
                    d[i * c + s] += g[i * n + j];
                }
            }
            vec![(x.clone(), d)]
        }
        Softmax(x) => {
            let n = x.cols();
            let mut d = vec![0.0; x.numel()];
            for ((dr, yr), gr) in d.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                dr.iter_mut().zip(yr.iter().zip(gr)).for_each(|(d, (y, g))| *d = y * (g - dot));
            }
            vec![(x.clone(), d)]
        }
        LayerNorm { x, inv_std } => {
            let n = x.cols();
            let nf = n as f64;
            let mut d = vec![0.0; x.numel()];
            for (r, ((dr, yr), gr)) in d.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)).enumerate() {
                let g_mean = gr.iter().sum::<f64>() / nf;
                let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / nf;
                for ((dv, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = inv_std[r] * (gv - g_mean - y * gy_mean);
                }
            }
            vec![(x.clone(), d)]
        }
        Relu(x) => vec![(x.clone(), g.iter().zip(x.data().iter()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect())],
        Sigmoid(x) => vec![(x.clone(), g.iter().zip(out.iter()).map(|(g, s)| g * s * (1.0 - s)).collect())],
        Log(x) => vec![(x.clone(), g.iter().zip(x.data().iter()).map(|(g, v)| g / v).collect())],
        Exp(x) => vec![(x.clone(), g.iter().zip(out.iter()).map(|(g, e)| g * e).collect())],
        Sum(x) => vec![(x.clone(), vec![g[0]; x.numel()])],
        Mean(x) => vec![(x.clone(), vec![g[0] / x.numel().max(1) as f64; x.numel()])],
        MeanRows(x) => {
            let r = x.rows().max(1) as f64;
            let c = x.cols();
            vec![(x.clone(), (0..x.numel()).map(|i| g[i % c] / r).collect())]
        }
        Dropout { x, mask } => vec![(x.clone(), g.iter().zip(mask).map(|(g, m)| g * m).collect())],
        StraightThrough(soft) => vec![(soft.clone(), g.to_vec())],
        CrossEntropy { logits, probs, targets } => {
            let v = logits.cols();
            let count = targets.iter().flatten().count() as f64;
            let mut d = vec![0.0; probs.len()];
            for (n, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    for j in 0..v {
                        d[n * v + j] = g[0] * probs[n * v + j] / count;
                    }
                    d[n * v + t] -= g[0] / count;
                }
            }
            vec![(logits.clone(), d)]
        }
        BceLogits { score, label } => {
            let n = score.numel() as f64;
            let d = score.data().iter().map(|&s| g[0] * (sigmoid(s) - label) / n).collect();
            vec![(score.clone(), d)]
        }
    }
}
