//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its value and the ids of its
//! inputs. [`Tape::backward`] walks the nodes in reverse and accumulates
//! gradients for every node that transitively depends on a trainable leaf;
//! constant subgraphs (for example the frozen base weights during capability
//! training) are skipped entirely.

use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
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
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Gelu(Var),
    Clamp(Var, T, T),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        // per row: (mean, 1/std)
        stats: Vec<(T, T)>,
    },
    CausalSoftmax(Var),
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    PickLogSoftmax(Var, Vec<(usize, usize)>),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    RowNormalize(Var, T),
    Index(Var, usize),
    Stack(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a constant leaf holding a copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`; the layout of every linear map `x Wᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let mut value = self.value(a).clone();
        for (x, &y) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *x *= y;
        }
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scaled(s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Multiplies every entry of `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = self.value(a).scaled(sv);
        let ng = self.ng(&[a, s]);
        self.push(value, Op::ScaleBy(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        let ng = self.ng(&[a]);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::ln);
        let ng = self.ng(&[a]);
        self.push(value, Op::Ln(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        let ng = self.ng(&[a]);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.ng(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        assert_eq!(g.len(), d);
        assert_eq!(b.len(), d);
        let eps = T::lit(LN_EPS);
        let dt = T::lit(d as f64);
        let mut value = Tensor::zeros(n, d);
        let mut stats = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rstd = T::one() / (var + eps).sqrt();
            let out = value.row_mut(i);
            for j in 0..d {
                out[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let ng = self.ng(&[x, gain, bias]);
        self.push(value, Op::LayerNorm { x, gain, bias, stats }, ng)
    }

    /// Row-wise softmax where entry `(i, j)` with `j > i` is masked out.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = av.shape();
        let mut value = Tensor::zeros(n, m);
        for i in 0..n {
            let lim = (i + 1).min(m);
            let p = crate::tensor::softmax(&av.row(i)[..lim]);
            value.row_mut(i)[..lim].copy_from_slice(&p);
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::CausalSoftmax(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = av.shape();
        let mut value = Tensor::zeros(n, m);
        for i in 0..n {
            let p = crate::tensor::softmax(av.row(i));
            value.row_mut(i).copy_from_slice(&p);
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::Softmax(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "column slice out of range");
        let value = Tensor::from_fn(av.rows(), len, |i, j| av.get(i, start + j));
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let value = Tensor::from_vec(rows, cols, data).expect("consistent sizes");
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Same buffer, new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshaped(rows, cols)
            .expect("reshape element count");
        let ng = self.ng(&[a]);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut value = Tensor::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(tv.row(id));
        }
        let ng = self.ng(&[table]);
        self.push(value, Op::Gather(table, ids.to_vec()), ng)
    }

    /// `1 x n` row of `log softmax(logits[row])[col]` for each `(row, col)`.
    pub fn pick_log_softmax(&mut self, logits: Var, picks: &[(usize, usize)]) -> Var {
        let lv = self.value(logits);
        let out: Vec<T> = picks
            .iter()
            .map(|&(r, c)| lv.get(r, c) - crate::tensor::log_sum_exp(lv.row(r)))
            .collect();
        let ng = self.ng(&[logits]);
        self.push(Tensor::row_vector(out), Op::PickLogSoftmax(logits, picks.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::scalar(av.sum() / T::lit(av.len() as f64));
        let ng = self.ng(&[a]);
        self.push(value, Op::Mean(a), ng)
    }

    /// Max-shifted `log Σ exp` over every entry.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(crate::tensor::log_sum_exp(self.value(a).data()));
        let ng = self.ng(&[a]);
        self.push(value, Op::LogSumExp(a), ng)
    }

    /// Scales each row to unit ℓ2 norm, `x / sqrt(|x|² + eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for i in 0..av.rows() {
            let n = (av.row(i).iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
            for x in value.row_mut(i) {
                *x /= n;
            }
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::RowNormalize(a, eps), ng)
    }

    /// Entry `i` of the flattened tensor as a `1 x 1` node.
    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let value = Tensor::scalar(self.value(a).data()[i]);
        let ng = self.ng(&[a]);
        self.push(value, Op::Index(a, i), ng)
    }

    /// Stacks `1 x 1` nodes into a `1 x n` row.
    pub fn stack(&mut self, items: &[Var]) -> Var {
        let vals: Vec<T> = items.iter().map(|&v| self.scalar(v)).collect();
        let ng = self.ng(items);
        self.push(Tensor::row_vector(vals), Op::Stack(items.to_vec()), ng)
    }

    /// Reverse sweep from the `1 x 1` node `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::filled(1, 1, T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    accumulate_gemm(grads, *a, g, false, bv, true, av.shape());
                }
                if wants(*b) {
                    accumulate_gemm(grads, *b, av, true, g, false, bv.shape());
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a bᵀ; da = g b; db = gᵀ a
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    accumulate_gemm(grads, *a, g, false, bv, false, av.shape());
                }
                if wants(*b) {
                    accumulate_gemm(grads, *b, g, true, av, false, bv.shape());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*row) {
                    let mut r = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (x, &y) in r.data_mut().iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                    accumulate(grads, *row, r);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    accumulate(grads, *a, zip_map(g, bv, |x, y| x * y));
                }
                if wants(*b) {
                    accumulate(grads, *b, zip_map(g, av, |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    accumulate(grads, *a, g.scaled(*s));
                }
            }
            Op::ScaleBy(a, s) => {
                let sv = nodes[s.0].value.item();
                if wants(*a) {
                    accumulate(grads, *a, g.scaled(sv));
                }
                if wants(*s) {
                    let av = &nodes[a.0].value;
                    let d: T = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).sum();
                    accumulate(grads, *s, Tensor::scalar(d));
                }
            }
            Op::AddScalar(a) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    accumulate(grads, *a, zip_map(g, &node.value, |x, y| x * y));
                }
            }
            Op::Ln(a) => {
                if wants(*a) {
                    accumulate(grads, *a, zip_map(g, &nodes[a.0].value, |x, y| x / y));
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    accumulate(
                        grads,
                        *a,
                        zip_map(g, &node.value, |x, y| x * (T::one() - y * y)),
                    );
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    accumulate(grads, *a, zip_map(g, &nodes[a.0].value, |x, y| x * gelu_grad(y)));
                }
            }
            Op::Clamp(a, lo, hi) => {
                if wants(*a) {
                    let (lo, hi) = (*lo, *hi);
                    accumulate(
                        grads,
                        *a,
                        zip_map(g, &nodes[a.0].value, |x, y| {
                            if y < lo || y > hi {
                                T::zero()
                            } else {
                                x
                            }
                        }),
                    );
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xv = &nodes[x.0].value;
                let gv = nodes[gain.0].value.data();
                let (n, d) = xv.shape();
                let dt = T::lit(d as f64);
                let mut dx = Tensor::zeros(n, d);
                let mut dg = Tensor::zeros(1, d);
                let mut db = Tensor::zeros(1, d);
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for i in 0..n {
                    let (mean, rstd) = stats[i];
                    let row = xv.row(i);
                    let gr = g.row(i);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gv[j];
                        dg.data_mut()[j] += gr[j] * xhat[j];
                        db.data_mut()[j] += gr[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / dt;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dt;
                    let out = dx.row_mut(i);
                    for j in 0..d {
                        out[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if wants(*gain) {
                    accumulate(grads, *gain, dg);
                }
                if wants(*bias) {
                    accumulate(grads, *bias, db);
                }
            }
            Op::CausalSoftmax(a) | Op::Softmax(a) => {
                if wants(*a) {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for (o, (&p, &q)) in dx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - dot);
                        }
                    }
                    accumulate(grads, *a, dx);
                }
            }
            Op::SliceCols(a, start) => {
                if wants(*a) {
                    let av = &nodes[a.0].value;
                    let mut dx = Tensor::zeros(av.rows(), av.cols());
                    for i in 0..g.rows() {
                        dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(grads, *a, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if wants(p) {
                        let part = Tensor::from_fn(g.rows(), w, |i, j| g.get(i, off + j));
                        accumulate(grads, p, part);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = &nodes[p.0].value;
                    let n = pv.len();
                    if wants(p) {
                        let part = Tensor::from_vec(
                            pv.rows(),
                            pv.cols(),
                            g.data()[off..off + n].to_vec(),
                        )
                        .expect("consistent sizes");
                        accumulate(grads, p, part);
                    }
                    off += n;
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    let (r, c) = nodes[a.0].value.shape();
                    accumulate(grads, *a, g.clone().reshaped(r, c).expect("same size"));
                }
            }
            Op::Gather(table, ids) => {
                if wants(*table) {
                    let tv = &nodes[table.0].value;
                    let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (x, &y) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::PickLogSoftmax(logits, picks) => {
                if wants(*logits) {
                    let lv = &nodes[logits.0].value;
                    let mut dl = Tensor::zeros(lv.rows(), lv.cols());
                    for (n, &(r, c)) in picks.iter().enumerate() {
                        let gn = g.data()[n];
                        let p = crate::tensor::softmax(lv.row(r));
                        let out = dl.row_mut(r);
                        for (j, &pj) in p.iter().enumerate() {
                            out[j] -= gn * pj;
                        }
                        out[c] += gn;
                    }
                    accumulate(grads, *logits, dl);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let (r, c) = nodes[a.0].value.shape();
                    accumulate(grads, *a, Tensor::filled(r, c, g.item()));
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let (r, c) = nodes[a.0].value.shape();
                    let s = g.item() / T::lit((r * c) as f64);
                    accumulate(grads, *a, Tensor::filled(r, c, s));
                }
            }
            Op::LogSumExp(a) => {
                if wants(*a) {
                    let av = &nodes[a.0].value;
                    let p = crate::tensor::softmax(av.data());
                    let gi = g.item();
                    let d = Tensor::from_vec(av.rows(), av.cols(), p.into_iter().map(|x| x * gi).collect())
                        .expect("same size");
                    accumulate(grads, *a, d);
                }
            }
            Op::RowNormalize(a, eps) => {
                if wants(*a) {
                    let av = &nodes[a.0].value;
                    let y = &node.value;
                    let mut dx = Tensor::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        let n = (av.row(i).iter().map(|&x| x * x).sum::<T>() + *eps).sqrt();
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for (o, (&p, &q)) in dx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = (q - p * dot) / n;
                        }
                    }
                    accumulate(grads, *a, dx);
                }
            }
            Op::Index(a, i) => {
                if wants(*a) {
                    let (r, c) = nodes[a.0].value.shape();
                    let mut d = Tensor::zeros(r, c);
                    d.data_mut()[*i] = g.item();
                    accumulate(grads, *a, d);
                }
            }
            Op::Stack(items) => {
                for (n, &v) in items.iter().enumerate() {
                    if wants(v) {
                        accumulate(grads, v, Tensor::scalar(g.data()[n]));
                    }
                }
            }
        }
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same size")
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_gemm<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    shape: (usize, usize),
) {
    match &mut grads[v.0] {
        Some(existing) => Tensor::gemm_into(a, ta, b, tb, T::one(), T::one(), existing),
        slot @ None => {
            let mut out = Tensor::zeros(shape.0, shape.1);
            Tensor::gemm_into(a, ta, b, tb, T::one(), T::zero(), &mut out);
            *slot = Some(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of a scalar function built on a fresh tape
    /// from a list of leaf tensors.
    fn check<F>(inputs: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);
        let eval = |xs: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let r = build(&mut t, &vs);
            t.scalar(r)
        };
        let h = 1e-5;
        for (n, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[n]).cloned().unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
            for i in 0..input.len() {
                let mut plus = inputs.clone();
                plus[n].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[n].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - fd).abs();
                assert!(
                    err <= 1e-6 || err / a.abs().max(fd.abs()) <= 1e-5,
                    "input {n} coord {i}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    fn t(rows: usize, cols: usize, seed: f64) -> Tensor<f64> {
        Tensor::from_fn(rows, cols, |i, j| ((i * cols + j) as f64 * 0.731 + seed).sin())
    }

    #[test]
    fn matmul_and_matmul_nt_gradients() {
        check(vec![t(3, 4, 0.1), t(4, 2, 0.7)], |tp, v| {
            let p = tp.matmul(v[0], v[1]);
            let q = tp.mul(p, p);
            tp.sum(q)
        });
        check(vec![t(3, 4, 0.2), t(5, 4, 0.3)], |tp, v| {
            let p = tp.matmul_nt(v[0], v[1]);
            let q = tp.tanh(p);
            tp.sum(q)
        });
    }

    #[test]
    fn layer_norm_gradient() {
        check(vec![t(3, 5, 0.4), t(1, 5, 1.1), t(1, 5, 2.3), t(3, 5, 0.9)], |tp, v| {
            let y = tp.layer_norm(v[0], v[1], v[2]);
            let z = tp.mul(y, v[3]);
            tp.sum(z)
        });
    }

    #[test]
    fn causal_attention_block_gradient() {
        check(vec![t(4, 3, 0.5), t(4, 3, 1.5), t(4, 3, 2.5)], |tp, v| {
            let s = tp.matmul_nt(v[0], v[1]);
            let s = tp.scale(s, 0.5);
            let p = tp.causal_softmax(s);
            let o = tp.matmul(p, v[2]);
            let o = tp.gelu(o);
            let o = tp.mul(o, o);
            tp.mean(o)
        });
    }

    #[test]
    fn pick_log_softmax_and_gather_gradient() {
        check(vec![t(6, 3, 0.2), t(5, 3, 0.8)], |tp, v| {
            let x = tp.gather(v[0], &[1, 4, 1, 0]);
            let logits = tp.matmul_nt(x, v[1]);
            let lp = tp.pick_log_softmax(logits, &[(0, 2), (1, 4), (3, 0)]);
            tp.mean(lp)
        });
    }

    #[test]
    fn structural_ops_gradient() {
        check(vec![t(2, 4, 0.3), t(2, 2, 0.6), t(1, 4, 0.9)], |tp, v| {
            let a = tp.slice_cols(v[0], 1, 2);
            let b = tp.concat_cols(&[a, v[1]]);
            let c = tp.reshape(b, 1, 8);
            let r = tp.reshape(v[2], 1, 4);
            let d = tp.slice_cols(c, 0, 4);
            let e = tp.concat_rows(&[d, r]);
            let f = tp.row_normalize(e, 1e-12);
            let g = tp.add_row(f, v[2]);
            let s = tp.index(g, 5);
            let s2 = tp.index(g, 2);
            let st = tp.stack(&[s, s2]);
            let sm = tp.softmax(st);
            let l = tp.ln(sm);
            let l = tp.add_scalar(l, 0.3);
            let ex = tp.exp(l);
            let m = tp.sum(ex);
            let k = tp.clamp(v[2], -0.5, 0.5);
            let ks = tp.sum(k);
            let z = tp.scale_by(m, ks);
            let lse = tp.log_sum_exp(g);
            tp.add(z, lse)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let d = tape.detach(x);
        let y = tape.mul(d, x);
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().item(), 3.0);
        assert!(g.get(d).is_none());
    }

    #[test]
    fn constant_root_has_no_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(2.0));
        let y = tape.exp(x);
        let g = tape.backward(y);
        assert!(g.get(x).is_none());
    }
}
