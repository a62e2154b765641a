//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, so several graphs can be
//! built concurrently against the same frozen parameters. Every operation
//! appends a node holding its output value; [`Graph::backward`] walks the tape
//! in reverse and returns the parameter gradients.

use std::sync::Arc;

use crate::tensor::{axpy, dot, matmul, matmul_nt, matmul_tn};
use crate::{Gradients, NnError, ParamId, ParamStore, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention visibility matrix, `allowed[i * keys + j]` is true when
/// query `i` may attend to key `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize, allowed: Vec<bool>) -> Result<Self, NnError> {
        if allowed.len() != queries * keys {
            return Err(NnError::Shape(format!(
                "mask of {queries}x{keys} needs {} entries, got {}",
                queries * keys,
                allowed.len()
            )));
        }
        Ok(Self { queries, keys, allowed })
    }

    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(queries * keys);
        for i in 0..queries {
            for j in 0..keys {
                allowed.push(f(i, j));
            }
        }
        Self { queries, keys, allowed }
    }

    /// Rows attend only within consecutive groups of `group` rows.
    pub fn block_diagonal(rows: usize, group: usize) -> Self {
        Self::from_fn(rows, rows, |i, j| i / group == j / group)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.keys + j]
    }

    fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.keys..(i + 1) * self.keys]
    }
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Cos(Var),
    Sin(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    MeanGroups(Var, usize),
    SumCols(Var),
    SumAll(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
}

pub struct Graph<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass.
pub struct Backward<T> {
    pub params: Gradients<T>,
    inputs: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Backward<T> {
    /// Gradient reaching an [`Graph::input`] node, if any flowed there.
    pub fn input_grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(v.0).and_then(Option::as_ref)
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), nodes: Vec::with_capacity(256) }
    }

    /// A graph without learnable parameters.
    pub fn detached() -> Self {
        Self { params: None, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param node without store").get(*id),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("graph has no parameter store");
        assert!(id.0 < store.len(), "parameter id out of range");
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out), Op::MatMulNt(a, b))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!((r, c), self.dims(b), "elementwise shape mismatch");
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor::matrix(r, c, out), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `[1, c]` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(b), (1, c), "add_row bias shape");
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for i in 0..r {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        self.push(out, Op::AddRow(x, b))
    }

    /// Multiplies row `i` of `x` by `s[i, 0]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Var {
        let (r, _) = self.dims(x);
        assert_eq!(self.dims(s), (r, 1), "mul_col scale shape");
        let mut out = self.value(x).clone();
        for i in 0..r {
            let si = self.value(s).data()[i];
            for o in out.row_mut(i) {
                *o = *o * si;
            }
        }
        self.push(out, Op::MulCol(x, s))
    }

    /// Divides row `i` of `x` by `s[i, 0]`.
    pub fn div_col(&mut self, x: Var, s: Var) -> Var {
        let (r, _) = self.dims(x);
        assert_eq!(self.dims(s), (r, 1), "div_col scale shape");
        let mut out = self.value(x).clone();
        for i in 0..r {
            let si = self.value(s).data()[i];
            for o in out.row_mut(i) {
                *o = *o / si;
            }
        }
        self.push(out, Op::DivCol(x, s))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::cos);
        self.push(out, Op::Cos(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::sin);
        self.push(out, Op::Sin(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::abs);
        self.push(out, Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::sqrt);
        self.push(out, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let r = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.dims(p);
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::matrix(r, total, out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            assert_eq!(pc, c, "concat_rows column mismatch");
            out.extend_from_slice(self.value(p).data());
            r += pr;
        }
        self.push(Tensor::matrix(r, c, out), Op::ConcatRows(parts.to_vec()))
    }

    /// Row `i` of the output is row `idx[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather index {i} out of {r} rows");
            out.extend_from_slice(self.value(x).row(i));
        }
        self.push(Tensor::matrix(idx.len(), c, out), Op::GatherRows(x, idx.to_vec()))
    }

    /// Places row `i` of `x` at row `idx[i]` of a zero `[rows, c]` matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(r, idx.len(), "scatter index count");
        let mut out = Tensor::zeros(rows, c);
        let mut seen = vec![false; rows];
        for (i, &dst) in idx.iter().enumerate() {
            assert!(dst < rows && !seen[dst], "scatter index {dst} invalid or repeated");
            seen[dst] = true;
            out.row_mut(dst).copy_from_slice(self.value(x).row(i));
        }
        self.push(out, Op::ScatterRows(x, idx.to_vec()))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(group > 0 && r % group == 0, "{r} rows not divisible into groups of {group}");
        let inv = T::one() / T::of(group as f64);
        let mut out = Tensor::zeros(r / group, c);
        for i in 0..r {
            axpy(inv, self.value(x).row(i), out.row_mut(i / group));
        }
        self.push(out, Op::MeanGroups(x, group))
    }

    /// Row sums, `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (r, _) = self.dims(x);
        let out = (0..r).map(|i| self.value(x).row(i).iter().copied().sum()).collect();
        self.push(Tensor::matrix(r, 1, out), Op::SumCols(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, c), "layer_norm gamma shape");
        assert_eq!(self.dims(beta), (1, c), "layer_norm beta shape");
        let eps = T::of(eps);
        let n = T::of(c as f64);
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        {
            let xv = self.value(x);
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            for i in 0..r {
                let row = xv.row(i);
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let inv = T::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for j in 0..c {
                    let h = (row[j] - mean) * inv;
                    xhat.push(h);
                    out.push(h * g[j] + b[j]);
                }
            }
        }
        self.push(Tensor::matrix(r, c, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = self.value(x).row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        self.push(Tensor::matrix(r, c, out), Op::LogSoftmax(x))
    }

    /// Element `(i, idx[i])` of each row, `[r, c] -> [r, 1]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(idx.len(), r, "pick needs one index per row");
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "pick column {j} out of {c}");
                self.value(x).get(i, j)
            })
            .collect();
        self.push(Tensor::matrix(r, 1, out), Op::Pick(x, idx.to_vec()))
    }

    /// Scaled dot-product attention over `heads` column slices of already
    /// projected queries, keys and values. Masked logits are excluded from the
    /// softmax (equivalent to setting them to −∞).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Arc<AttentionMask>>,
    ) -> Result<Var, NnError> {
        let (n, d) = self.dims(q);
        let (m, dk) = self.dims(k);
        let (mv, dv) = self.dims(v);
        if dk != d || dv != d || mv != m {
            return Err(NnError::Shape(format!(
                "attention q {n}x{d}, k {m}x{dk}, v {mv}x{dv}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NnError::Shape(format!("model dim {d} not divisible by {heads} heads")));
        }
        if m == 0 {
            return Err(NnError::Shape("attention over zero keys".into()));
        }
        if let Some(mask) = &mask {
            if mask.queries != n || mask.keys != m {
                return Err(NnError::Shape(format!(
                    "mask {}x{} for attention {n}x{m}",
                    mask.queries, mask.keys
                )));
            }
            if let Some(i) = (0..n).find(|&i| !mask.row(i).iter().any(|&a| a)) {
                return Err(NnError::FullyMaskedRow(i));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * m];
        let mut out = Tensor::zeros(n, d);
        {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            let mut logits = vec![T::zero(); m];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..n {
                    let qi = &qv.row(i)[cols.clone()];
                    let mut mx = T::neg_infinity();
                    for j in 0..m {
                        if mask.as_ref().is_none_or(|mk| mk.allowed(i, j)) {
                            let s = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                            logits[j] = s;
                            mx = mx.max(s);
                        }
                    }
                    let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                    let mut z = T::zero();
                    for j in 0..m {
                        if mask.as_ref().is_none_or(|mk| mk.allowed(i, j)) {
                            let e = (logits[j] - mx).exp();
                            p[j] = e;
                            z = z + e;
                        }
                    }
                    let orow = &mut out.row_mut(i)[cols.clone()];
                    for j in 0..m {
                        if p[j] != T::zero() {
                            p[j] = p[j] / z;
                            axpy(p[j], &vv.row(j)[cols.clone()], orow);
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    /// `x · wᵀ + b` with `w` stored `[out, in]` and `b` `[1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul_nt(x, w);
        self.add_row(y, b)
    }

    pub fn backward(&self, loss: Var) -> Result<Backward<T>, NnError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::Shape(format!("backward from non-scalar {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            return Err(NnError::NonFinite("loss".into()));
        }
        self.backward_seeded(vec![(loss, Tensor::scalar(T::one()))])
    }

    /// Backward pass starting from arbitrary upstream gradients on any nodes.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Backward<T>, NnError> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            let t = self.value(v);
            if t.shape() != g.shape() && (t.rows(), t.cols()) != (g.rows(), g.cols()) {
                return Err(NnError::Shape(format!(
                    "seed gradient {:?} for node of shape {:?}",
                    g.shape(),
                    t.shape()
                )));
            }
            let g = Tensor::matrix(t.rows(), t.cols(), g.into_data());
            acc(&mut grads, v, g);
            top = top.max(v.0 + 1);
        }
        let num_params = self.params.map_or(0, ParamStore::len);
        let mut out = Backward { params: Gradients::empty(num_params), inputs: (0..n).map(|_| None).collect() };

        for idx in (0..top).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => out.inputs[idx] = Some(g),
                Op::Param(id) => out.params.accumulate_owned(*id, g),
                op => self.backprop_op(op, Var(idx), g, &mut grads),
            }
        }
        Ok(out)
    }

    fn backprop_op(&self, op: &Op<T>, node: Var, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (gr, gc) = (g.rows(), g.cols());
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let da = matmul_nt(g.data(), self.value(*b).data(), m, n, k);
                let db = matmul_tn(self.value(*a).data(), g.data(), m, k, n);
                acc(grads, *a, Tensor::matrix(m, k, da));
                acc(grads, *b, Tensor::matrix(k, n, db));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                let da = matmul(g.data(), self.value(*b).data(), m, n, k);
                let db = matmul_tn(g.data(), self.value(*a).data(), m, n, k);
                acc(grads, *a, Tensor::matrix(m, k, da));
                acc(grads, *b, Tensor::matrix(n, k, db));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *b, g.map(|x| -x));
                acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let da = elementwise(&g, self.value(*b), |x, y| x * y);
                let db = elementwise(&g, self.value(*a), |x, y| x * y);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::AddRow(x, b) => {
                let mut db = vec![T::zero(); gc];
                for i in 0..gr {
                    axpy(T::one(), g.row(i), &mut db);
                }
                acc(grads, *b, Tensor::matrix(1, gc, db));
                acc(grads, *x, g);
            }
            Op::MulCol(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s).data();
                let mut dx = g.clone();
                let mut ds = Vec::with_capacity(gr);
                for i in 0..gr {
                    ds.push(dot(g.row(i), xv.row(i)));
                    for v in dx.row_mut(i) {
                        *v = *v * sv[i];
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *s, Tensor::matrix(gr, 1, ds));
            }
            Op::DivCol(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s).data();
                let mut dx = g.clone();
                let mut ds = Vec::with_capacity(gr);
                for i in 0..gr {
                    ds.push(-dot(g.row(i), xv.row(i)) / (sv[i] * sv[i]));
                    for v in dx.row_mut(i) {
                        *v = *v / sv[i];
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *s, Tensor::matrix(gr, 1, ds));
            }
            Op::Scale(x, c) => acc(grads, *x, g.map(|v| v * *c)),
            Op::Relu(x) => {
                let d = elementwise(&g, self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                acc(grads, *x, d);
            }
            Op::Cos(x) => acc(grads, *x, elementwise(&g, self.value(*x), |gv, xv| -gv * xv.sin())),
            Op::Sin(x) => acc(grads, *x, elementwise(&g, self.value(*x), |gv, xv| gv * xv.cos())),
            Op::Abs(x) => {
                let d = elementwise(&g, self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                acc(grads, *x, d);
            }
            Op::Sqrt(x) => {
                let d = elementwise(&g, self.value(node), |gv, y| {
                    if y > T::zero() {
                        gv / (T::of(2.0) * y)
                    } else {
                        T::zero()
                    }
                });
                acc(grads, *x, d);
            }
            Op::Square(x) => acc(grads, *x, elementwise(&g, self.value(*x), |gv, xv| T::of(2.0) * xv * gv)),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    let mut d = Vec::with_capacity(gr * pc);
                    for i in 0..gr {
                        d.extend_from_slice(&g.row(i)[off..off + pc]);
                    }
                    acc(grads, p, Tensor::matrix(gr, pc, d));
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pr = self.dims(p).0;
                    let d = g.data()[off * gc..(off + pr) * gc].to_vec();
                    acc(grads, p, Tensor::matrix(pr, gc, d));
                    off += pr;
                }
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.dims(*x);
                let mut d = Tensor::zeros(r, c);
                for (i, &src) in idx.iter().enumerate() {
                    axpy(T::one(), g.row(i), d.row_mut(src));
                }
                acc(grads, *x, d);
            }
            Op::ScatterRows(x, idx) => {
                let c = gc;
                let mut d = Vec::with_capacity(idx.len() * c);
                for &dst in idx {
                    d.extend_from_slice(g.row(dst));
                }
                acc(grads, *x, Tensor::matrix(idx.len(), c, d));
            }
            Op::MeanGroups(x, group) => {
                let (r, c) = self.dims(*x);
                let inv = T::one() / T::of(*group as f64);
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    d.extend(g.row(i / group).iter().map(|&v| v * inv));
                }
                acc(grads, *x, Tensor::matrix(r, c, d));
            }
            Op::SumCols(x) => {
                let (r, c) = self.dims(*x);
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    d.extend(std::iter::repeat_n(g.data()[i], c));
                }
                acc(grads, *x, Tensor::matrix(r, c, d));
            }
            Op::SumAll(x) => {
                let (r, c) = self.dims(*x);
                acc(grads, *x, Tensor::full(r, c, g.item()));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = gc;
                let n = T::of(c as f64);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = Vec::with_capacity(gr * c);
                let mut dxhat = vec![T::zero(); c];
                for i in 0..gr {
                    let gi = g.row(i);
                    let hi = &xhat[i * c..(i + 1) * c];
                    for j in 0..c {
                        dgamma[j] = dgamma[j] + gi[j] * hi[j];
                        dbeta[j] = dbeta[j] + gi[j];
                        dxhat[j] = gi[j] * gam[j];
                    }
                    let sum_d: T = dxhat.iter().copied().sum();
                    let sum_dh = dot(&dxhat, hi);
                    let k = inv_std[i] / n;
                    for j in 0..c {
                        dx.push(k * (n * dxhat[j] - sum_d - hi[j] * sum_dh));
                    }
                }
                acc(grads, *x, Tensor::matrix(gr, c, dx));
                acc(grads, *gamma, Tensor::matrix(1, c, dgamma));
                acc(grads, *beta, Tensor::matrix(1, c, dbeta));
            }
            Op::LogSoftmax(x) => {
                let y = self.value(node);
                let mut d = Vec::with_capacity(gr * gc);
                for i in 0..gr {
                    let gi = g.row(i);
                    let s: T = gi.iter().copied().sum();
                    d.extend(gi.iter().zip(y.row(i)).map(|(&gv, &yv)| gv - yv.exp() * s));
                }
                acc(grads, *x, Tensor::matrix(gr, gc, d));
            }
            Op::Pick(x, idx) => {
                let (r, c) = self.dims(*x);
                let mut d = Tensor::zeros(r, c);
                for (i, &j) in idx.iter().enumerate() {
                    d.data_mut()[i * c + j] = g.data()[i];
                }
                acc(grads, *x, d);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (n, d) = self.dims(*q);
                let m = self.dims(*k).0;
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Tensor::zeros(n, d);
                let mut dk = Tensor::zeros(m, d);
                let mut dv = Tensor::zeros(m, d);
                let mut dp = vec![T::zero(); m];
                for h in 0..*heads {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                        let gi = &g.row(i)[cols.clone()];
                        let mut s = T::zero();
                        for j in 0..m {
                            if p[j] != T::zero() {
                                dp[j] = dot(gi, &vv.row(j)[cols.clone()]);
                                s = s + p[j] * dp[j];
                                axpy(p[j], gi, &mut dv.row_mut(j)[cols.clone()]);
                            }
                        }
                        let qi = &qv.row(i)[cols.clone()];
                        for j in 0..m {
                            if p[j] != T::zero() {
                                let ds = p[j] * (dp[j] - s) * scale;
                                axpy(ds, &kv.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                                axpy(ds, qi, &mut dk.row_mut(j)[cols.clone()]);
                            }
                        }
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
        }
    }
}

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::matrix(a.rows(), a.cols(), data)
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(cur) => cur.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
