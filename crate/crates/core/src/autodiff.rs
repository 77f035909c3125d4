//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an arena of nodes appended in construction order, so the
//! node list is already a topological order. [`Graph::backward`] walks it in
//! exact reverse. Leaves are registered with [`Graph::leaf`]; a node requires
//! a gradient iff at least one of its inputs does, so frozen subgraphs are
//! skipped entirely during the backward sweep.
//!
//! Calling `backward` a second time without [`Graph::reset_grads`] is an
//! error rather than silent accumulation.

use crate::error::{Error, Result};
use crate::tensor::{kernels, s, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxRows(Var),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Number of nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (non-leaf) operations.
    pub fn num_ops(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`. `None` when
    /// `v` does not require a gradient; zeros when it does but was not
    /// reached from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape();
        Some(match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix(&self, op: &'static str, v: Var, other: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::dim(op, self.shape(v), self.shape(other)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a, b)?;
        let (k2, n) = self.matrix("matmul", b, a)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::Matmul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul_nt", a, b)?;
        let (n, k2) = self.matrix("matmul_nt", b, a)?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::MatmulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transposed()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Transpose(a)))
    }

    /// Elementwise sum. When `b` is a vector matching the last extent of a
    /// matrix `a`, it is broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect();
            let out = Tensor::new(sa, data)?;
            let rg = self.any_grad(&[a, b]);
            return Ok(self.push(out, rg, Op::Add(a, b)));
        }
        match (sa, sb) {
            (&[m, n], &[n2]) if n == n2 => {
                let bv = self.value(b).data();
                let mut data = self.value(a).data().to_vec();
                for row in data.chunks_mut(n) {
                    for (x, &y) in row.iter_mut().zip(bv) {
                        *x = *x + y;
                    }
                }
                let out = Tensor::new(&[m, n], data)?;
                let rg = self.any_grad(&[a, b]);
                Ok(self.push(out, rg, Op::AddRow(a, b)))
            }
            _ => Err(Error::dim("add", sa, sb)),
        }
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Scale(a, factor))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c: T = s(SQRT_2_OVER_PI);
        let k: T = s(GELU_CUBIC);
        let half: T = s(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Gelu(a))
    }

    /// Row-wise layer normalization followed by the affine map
    /// `x̂ · gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, d) = self.matrix("layer_norm", x, gamma)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let dt: T = s(d as f64);
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dt;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gs[c] + bs[c];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let out = Tensor::new(&[n, d], out)?;
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.matrix("softmax_rows", a, a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&[n, k], out)?, rg, Op::SoftmaxRows(a)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.matrix("slice_cols", a, a)?;
        if len == 0 || start + len > d {
            return Err(Error::Index {
                what: "column slice",
                index: start + len,
                len: d,
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&[n, len], out)?, rg, Op::SliceCols { a, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.matrix("slice_rows", a, a)?;
        if len == 0 || start + len > n {
            return Err(Error::Index {
                what: "row slice",
                index: start + len,
                len: n,
            });
        }
        let out = self.value(a).data()[start * d..(start + len) * d].to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&[len, d], out)?, rg, Op::SliceRows { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (n, _) = self.matrix("concat_cols", first, first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pd) = self.matrix("concat_cols", p, first)?;
            if pn != n {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pd);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(&[n, total], out)?, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, d) = self.matrix("concat_rows", first, first)?;
        let mut rows = 0;
        for &p in parts {
            let (pn, pd) = self.matrix("concat_rows", p, first)?;
            if pd != d {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pn;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(&[rows, d], out)?, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), rg, Op::Sum(a))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.matrix("softmax_cross_entropy", logits, logits)?;
        if targets.len() != n {
            return Err(Error::dim("softmax_cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index {
                what: "class target",
                index: bad,
                len: k,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            loss = loss + (lse - row[t]);
            softmax_in_place(row);
        }
        loss = loss / s(n as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let input = &nodes[v.0];
            if !input.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); input.value.numel()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = node.value.shape()[1];
                let bd = nodes[b.0].value.data();
                let ad = nodes[a.0].value.data();
                acc(*a, &mut |da| kernels::gemm_nt(g, bd, da, m, n, k));
                acc(*b, &mut |db| kernels::gemm_tn(ad, g, db, k, m, n));
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = node.value.shape()[1];
                let bd = nodes[b.0].value.data();
                let ad = nodes[a.0].value.data();
                acc(*a, &mut |da| kernels::gemm(g, bd, da, m, n, k));
                acc(*b, &mut |db| kernels::gemm_tn(g, ad, db, n, m, k));
            }
            Op::Transpose(a) => {
                let (r, c) = nodes[a.0].value.dims2().unwrap();
                acc(*a, &mut |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = da[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::AddRow(a, b) => {
                let n = nodes[b.0].value.numel();
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(a, f) => {
                acc(*a, &mut |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d = *d + gv * *f;
                    }
                });
            }
            Op::Relu(a) => {
                let xs = nodes[a.0].value.data();
                acc(*a, &mut |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(xs) {
                        if x > T::zero() {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xs = nodes[a.0].value.data();
                let c: T = s(SQRT_2_OVER_PI);
                let k: T = s(GELU_CUBIC);
                let half: T = s(0.5);
                let three: T = s(3.0);
                acc(*a, &mut |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(xs) {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        let dy = half * (T::one() + t) + half * x * dt;
                        *d = *d + gv * dy;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = nodes[gamma.0].value.numel();
                let gs = nodes[gamma.0].value.data();
                let dt: T = s(d as f64);
                acc(*gamma, &mut |dg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] = dg[c] + grow[c] * hrow[c];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                });
                acc(*x, &mut |dx| {
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            let dh = grow[c] * gs[c];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hrow[c];
                        }
                        mean_dh = mean_dh / dt;
                        mean_dh_h = mean_dh_h / dt;
                        for c in 0..d {
                            let dh = grow[c] * gs[c];
                            let v = inv_std[r] * (dh - mean_dh - hrow[c] * mean_dh_h);
                            dx[r * d + c] = dx[r * d + c] + v;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let k = node.value.shape()[1];
                let ys = node.value.data();
                acc(*a, &mut |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(k).zip(g.chunks(k)).zip(ys.chunks(k)) {
                        let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&gv, &y)| s + gv * y);
                        for c in 0..k {
                            drow[c] = drow[c] + yrow[c] * (grow[c] - dot);
                        }
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let d = nodes[a.0].value.shape()[1];
                let len = node.value.shape()[1];
                acc(*a, &mut |da| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut da[r * d + start..r * d + start + len], grow);
                    }
                });
            }
            Op::SliceRows { a, start } => {
                let d = node.value.shape()[1];
                acc(*a, &mut |da| add_into(&mut da[start * d..start * d + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    acc(*p, &mut |dp| {
                        for (r, drow) in dp.chunks_mut(w).enumerate() {
                            add_into(drow, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(*p, &mut |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Sum(a) => {
                acc(*a, &mut |da| {
                    for d in da.iter_mut() {
                        *d = *d + g[0];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = nodes[logits.0].value.shape()[1];
                let scale = g[0] / s(targets.len() as f64);
                acc(*logits, &mut |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            dl[r * k + c] = dl[r * k + c] + (probs[r * k + c] - onehot) * scale;
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = *d + v;
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
