//! Reverse-mode gradient tape.
//!
//! Operations are recorded in execution order; [`Tape::backward`] walks the
//! record in reverse and accumulates vector-Jacobian products. Shapes are
//! checked before any arithmetic happens, and every forward result is checked
//! for non-finite values.

use super::params::ParamSet;
use super::tensor::{matmul_at_b, matmul_raw, Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Const,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    L2NormRows {
        x: Var,
        norms: Vec<T>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
enum Stored<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

#[derive(Debug)]
struct Node<'p, T> {
    value: Stored<'p, T>,
    op: Op<T>,
}

impl<T> Node<'_, T> {
    fn value(&self) -> &Tensor<T> {
        match &self.value {
            Stored::Owned(t) => t,
            Stored::Borrowed(t) => t,
        }
    }
}

/// Recording of one forward computation. Parameters are borrowed from their
/// [`ParamSet`] for the lifetime `'p` rather than copied.
#[derive(Debug, Default)]
pub struct Tape<'p, T> {
    nodes: Vec<Node<'p, T>>,
    row_losses: Vec<T>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            row_losses: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value()
    }

    /// Per-row losses of the most recent masked cross-entropy.
    pub fn last_row_losses(&self) -> &[T] {
        &self.row_losses
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, primitive: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { primitive });
        }
        self.nodes.push(Node {
            value: Stored::Owned(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Const, "constant")
    }

    /// Records parameter `id` of `params` as a differentiable leaf.
    pub fn param(&mut self, params: &'p ParamSet<T>, id: usize) -> Result<Var> {
        let value = params.value(id);
        if !value.all_finite() {
            return Err(Error::NonFinite { primitive: "param" });
        }
        self.nodes.push(Node {
            value: Stored::Borrowed(value),
            op: Op::Param(id),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records every parameter in declaration order.
    pub fn params(&mut self, params: &'p ParamSet<T>) -> Result<Vec<Var>> {
        (0..params.len()).map(|id| self.param(params, id)).collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n, false);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_t", format!("{m}x{k} * ({n}x{k2})^T")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n, true);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(shape_err(
                "add_row",
                format!("row of length {} onto {m}x{n}", self.value(row).len()),
            ));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x = *x + b;
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "affine lengths {}/{} for width {n}",
                    self.value(gamma).len(),
                    self.value(beta).len()
                ),
            ));
        }
        let eps = T::cast_from(LAYER_NORM_EPS);
        let nf = T::cast_from(n as f64);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Softmax(a), "softmax")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| gelu_forward(x));
        self.push(out, Op::Gelu(a), "gelu")
    }

    /// Divides each row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let xs = self.value(a).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if nrm == T::zero() {
                return Err(Error::NonFinite {
                    primitive: "l2_normalize",
                });
            }
            norms.push(nrm);
            for c in 0..n {
                out[r * n + c] = row[c] / nrm;
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push(out, Op::L2NormRows { x: a, norms }, "l2_normalize")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > m || len == 0 {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {m}", start + len)));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        self.push(
            Tensor::matrix(len, n, data)?,
            Op::SliceRows { x: a, start },
            "slice_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs".into()));
        };
        let n = self.dims(first).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(shape_err("concat_rows", format!("width {pn} vs {n}")));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        self.push(
            Tensor::matrix(m, n, data)?,
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n || len == 0 {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        self.push(
            Tensor::matrix(m, len, data)?,
            Op::SliceCols { x: a, start },
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs".into()));
        };
        let m = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(shape_err("concat_cols", format!("height {pm} vs {m}")));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            Tensor::matrix(m, total, data)?,
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::vector(vec![s]), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::cast_from(t.len() as f64);
        self.push(Tensor::vector(vec![s]), Op::Mean(a), "mean")
    }

    /// Mean over rows of `logsumexp(valid logits) - logit[target]`.
    ///
    /// `mask` is row-major over `logits` and marks which columns take part in
    /// each row's normalizer; every target column must be valid.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m || mask.len() != m * n {
            return Err(shape_err(
                "masked_cross_entropy",
                format!(
                    "{m}x{n} logits with {} targets and {} mask entries",
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        for (r, &t) in targets.iter().enumerate() {
            if t >= n || !mask[r * n + t] {
                return Err(shape_err(
                    "masked_cross_entropy",
                    format!("row {r}: target column {t} is not a valid entry"),
                ));
            }
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); m * n];
        let mut losses = Vec::with_capacity(m);
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let valid = &mask[r * n..(r + 1) * n];
            let mx = row
                .iter()
                .zip(valid)
                .filter(|(_, &v)| v)
                .map(|(&x, _)| x)
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..n {
                if valid[c] {
                    let e = (row[c] - mx).exp();
                    probs[r * n + c] = e;
                    z = z + e;
                }
            }
            for c in 0..n {
                probs[r * n + c] = probs[r * n + c] / z;
            }
            losses.push(z.ln() + mx - row[targets[r]]);
        }
        let mean = losses.iter().copied().sum::<T>() / T::cast_from(m as f64);
        self.row_losses = losses;
        self.push(
            Tensor::vector(vec![mean]),
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            "masked_cross_entropy",
        )
    }

    /// Gradients of scalar `loss` with respect to every parameter of a
    /// `param_count`-sized [`ParamSet`]. Parameters the loss does not reach
    /// receive zeros of their own shape.
    pub fn backward(&self, loss: Var, params: &ParamSet<T>) -> Result<Vec<Tensor<T>>> {
        let adj = self.adjoints(loss)?;
        let mut grads: Vec<Tensor<T>> = params.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if id >= grads.len() {
                    return Err(shape_err(
                        "backward",
                        format!("parameter index {id} outside set of {}", grads.len()),
                    ));
                }
                if let Some(g) = &adj[i] {
                    for (acc, &v) in grads[id].data_mut().iter_mut().zip(g) {
                        *acc = *acc + v;
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Gradient of scalar `loss` with respect to an arbitrary recorded value.
    pub fn gradient_of(&self, loss: Var, wrt: Var) -> Result<Tensor<T>> {
        let adj = self.adjoints(loss)?;
        let shape = self.value(wrt).shape().to_vec();
        match &adj[wrt.0] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Ok(Tensor::zeros(&shape)),
        }
    }

    fn adjoints(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss has shape {:?}, expected a scalar", self.value(loss).shape()),
            ));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                // dA = G * B^T, dB = A^T * G
                let da = matmul_raw(g, self.value(*b).data(), m, n, k, true);
                let db = matmul_at_b(self.value(*a).data(), g, m, k, n);
                accumulate(adj, *a, &da);
                accumulate(adj, *b, &db);
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                // C = A B^T: dA = G * B, dB = G^T * A
                let da = matmul_raw(g, self.value(*b).data(), m, n, k, false);
                let db = matmul_at_b(g, self.value(*a).data(), m, n, k);
                accumulate(adj, *a, &da);
                accumulate(adj, *b, &db);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g);
                accumulate(adj, *b, g);
            }
            Op::Mul(a, b) => {
                let da: Vec<T> = g.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                let db: Vec<T> = g.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                accumulate(adj, *a, &da);
                accumulate(adj, *b, &db);
            }
            Op::AddRow(a, row) => {
                accumulate(adj, *a, g);
                let n = self.value(*row).len();
                let mut dr = vec![T::zero(); n];
                for chunk in g.chunks(n) {
                    for (acc, &v) in dr.iter_mut().zip(chunk) {
                        *acc = *acc + v;
                    }
                }
                accumulate(adj, *row, &dr);
            }
            Op::Scale(a, s) => {
                let da: Vec<T> = g.iter().map(|&v| v * *s).collect();
                accumulate(adj, *a, &da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x);
                let gm = self.value(*gamma).data();
                let nf = T::cast_from(n as f64);
                let mut dx = vec![T::zero(); m * n];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for r in 0..m {
                    let gy = &g[r * n..(r + 1) * n];
                    let h = &xhat[r * n..(r + 1) * n];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for c in 0..n {
                        dgamma[c] = dgamma[c] + gy[c] * h[c];
                        dbeta[c] = dbeta[c] + gy[c];
                        let dh = gy[c] * gm[c];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * h[c];
                    }
                    mean_dh = mean_dh / nf;
                    mean_dh_h = mean_dh_h / nf;
                    for c in 0..n {
                        let dh = gy[c] * gm[c];
                        dx[r * n + c] = rstd[r] * (dh - mean_dh - h[c] * mean_dh_h);
                    }
                }
                accumulate(adj, *x, &dx);
                accumulate(adj, *gamma, &dgamma);
                accumulate(adj, *beta, &dbeta);
            }
            Op::Softmax(a) => {
                let n = self.dims(*a).1;
                let y = node.value().data();
                let mut da = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                    let s: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..n {
                        dr[c] = yr[c] * (gr[c] - s);
                    }
                }
                accumulate(adj, *a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| gv * gelu_derivative(x))
                    .collect();
                accumulate(adj, *a, &da);
            }
            Op::L2NormRows { x, norms } => {
                let n = self.dims(*x).1;
                let y = node.value().data();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..norms.len() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let s: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..n {
                        dx[r * n + c] = (gr[c] - yr[c] * s) / norms[r];
                    }
                }
                accumulate(adj, *x, &dx);
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.dims(*x);
                let mut dx = vec![T::zero(); m * n];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                accumulate(adj, *x, &dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    accumulate(adj, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let len = node.value().cols();
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                accumulate(adj, *x, &dx);
            }
            Op::ConcatCols(parts) => {
                let m = node.value().rows();
                let total = node.value().cols();
                let mut offset = 0;
                for &p in parts {
                    let pn = self.dims(p).1;
                    let mut dp = Vec::with_capacity(m * pn);
                    for r in 0..m {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + pn]);
                    }
                    accumulate(adj, p, &dp);
                    offset += pn;
                }
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).len()];
                accumulate(adj, *a, &da);
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let da = vec![g[0] / T::cast_from(len as f64); len];
                accumulate(adj, *a, &da);
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let (m, n) = self.dims(*logits);
                let w = g[0] / T::cast_from(m as f64);
                let mut dl = vec![T::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        if mask[r * n + c] {
                            let onehot = if c == targets[r] { T::one() } else { T::zero() };
                            dl[r * n + c] = w * (probs[r * n + c] - onehot);
                        }
                    }
                }
                accumulate(adj, *logits, &dl);
            }
        }
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a = *a + x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        z = z + *x;
    }
    for x in row.iter_mut() {
        *x = *x / z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_forward<T: Scalar>(x: T) -> T {
    let c = T::cast_from(GELU_C);
    let a = T::cast_from(GELU_A);
    let half = T::cast_from(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::cast_from(GELU_C);
    let a = T::cast_from(GELU_A);
    let half = T::cast_from(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::cast_from(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_loss(tape: &Tape<'_, f64>, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::matrix(2, 3, vec![0.5; 6]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&p, 0).unwrap();
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss, &p).unwrap();
        assert_eq!(g[0].data(), &[1.0; 6]);
        assert_eq!(g[0].shape(), &[2, 3]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::vector(vec![1.0f64, -2.0])).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&p, 0).unwrap();
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        assert_eq!(scalar_loss(&tape, loss), 2.5);
        let g = tape.backward(loss, &p).unwrap();
        assert_eq!(g[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn shape_mismatch_is_reported_before_compute() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let before = tape.len();
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
        assert_eq!(tape.len(), before);
    }

    #[test]
    fn non_finite_names_primitive() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::vector(vec![1e300, 1e300])).unwrap();
        let err = tape.scale(a, 1e300).unwrap_err();
        assert!(matches!(err, Error::NonFinite { primitive: "scale" }));
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let err = tape.l2_normalize_rows(z).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFinite {
                primitive: "l2_normalize"
            }
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape
            .constant(Tensor::matrix(2, 3, vec![50.0, -50.0, 0.0, 1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let s = tape.softmax(a).unwrap();
        for r in 0..2 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_cross_entropy_ignores_masked_columns() {
        let mut tape = Tape::<f64>::new();
        let l = tape
            .constant(Tensor::matrix(1, 3, vec![1.0, 1.0, 100.0]).unwrap())
            .unwrap();
        let loss = tape.masked_cross_entropy(l, &[0], &[true, true, false]).unwrap();
        assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-12);
        assert!(tape.masked_cross_entropy(l, &[2], &[true, true, false]).is_err());
    }
}
