//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value. [`Tape::backward`] walks the nodes in reverse and returns the
//! gradient of a scalar node with respect to every node that influenced it.
//! Every value is a `rows x cols` matrix; vectors are `1 x n` and scalars are
//! `1 x 1`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Linear { x: usize, w: usize, b: Option<usize> },
    MatMul { a: usize, b: usize },
    MatMulT { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: F },
    Div { x: usize, c: F },
    OneMinus { x: usize },
    Exp { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Softmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<F>, inv_std: Vec<F> },
    Dropout { x: usize, mask: Vec<F> },
    ConcatCols { parts: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    PairConcat { a: usize, b: usize, pairs: Vec<(usize, usize)> },
    Nll { probs: usize, targets: Vec<usize>, clamp: F },
    Sum { x: usize },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Operation recorder. See the module docs.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    fully_masked_rows: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

// y[n,m] += a[n,k] * b[k,m]
fn gemm_nn<F: Real>(out: &mut [F], a: &[F], b: &[F], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

// y[n,m] += a[n,k] * b[m,k]^T
fn gemm_nt<F: Real>(out: &mut [F], a: &[F], b: &[F], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * m + j] = out[i * m + j] + s;
        }
    }
}

// y[k,m] += a[n,k]^T * b[n,m]
fn gemm_tn<F: Real>(out: &mut [F], a: &[F], b: &[F], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let brow = &b[r * m..(r + 1) * m];
        for p in 0..k {
            let av = a[r * k + p];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn matrix<F: Real>(rows: usize, cols: usize, data: Vec<F>) -> Tensor<F> {
    Tensor::new(vec![rows, cols], data).expect("matrix extents are consistent")
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), fully_masked_rows: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of attention rows whose keys were all masked out so far. Such
    /// rows produce zero output instead of a distribution.
    pub fn fully_masked_rows(&self) -> usize {
        self.fully_masked_rows
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    /// Record a constant or parameter. Any shape is accepted and viewed as a
    /// matrix over its last axis.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t.as_matrix(), Op::Leaf)
    }

    /// `x W^T + b` over the rows of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.dims(x);
        let (m, kw) = self.dims(w);
        if k != kw {
            return Err(Error::shape("linear", "input features", kw, k));
        }
        let mut out = vec![F::zero(); n * m];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != m {
                return Err(Error::shape("linear", "bias length", m, bias.len()));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bias);
            }
        }
        gemm_nt(&mut out, self.value(x).data(), self.value(w).data(), n, k, m);
        Ok(self.push(matrix(n, m, out), Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) }))
    }

    /// `a b` for `a: n x k`, `b: k x m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (kb, m) = self.dims(b);
        if k != kb {
            return Err(Error::shape("matmul", "inner dimension", k, kb));
        }
        let mut out = vec![F::zero(); n * m];
        gemm_nn(&mut out, self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.push(matrix(n, m, out), Op::MatMul { a: a.0, b: b.0 }))
    }

    /// `a b^T` for `a: n x k`, `b: m x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (m, kb) = self.dims(b);
        if k != kb {
            return Err(Error::shape("matmul_t", "inner dimension", k, kb));
        }
        let mut out = vec![F::zero(); n * m];
        gemm_nt(&mut out, self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.push(matrix(n, m, out), Op::MatMulT { a: a.0, b: b.0 }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(Error::shape(op, "rows", ra, rb));
        }
        if ca != cb {
            return Err(Error::shape(op, "columns", ca, cb));
        }
        Ok((ra, ca))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        Ok(self.push(matrix(r, c, data), Op::Add { a: a.0, b: b.0 }))
    }

    /// Sum of two or more nodes of identical shape.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) =
            terms.split_first().ok_or_else(|| Error::Config("add_all needs at least one term".into()))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        Ok(self.push(matrix(r, c, data), Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale { x: x.0, c })
    }

    /// `x / c`; exact where scaling by a rounded `1 / c` is not.
    pub fn div_scalar(&mut self, x: Var, c: F) -> Var {
        let t = self.value(x).map(|v| v / c);
        self.push(t, Op::Div { x: x.0, c })
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| F::one() - v);
        self.push(t, Op::OneMinus { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.exp());
        self.push(t, Op::Exp { x: x.0 })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(F::zero()));
        self.push(t, Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| F::one() / (F::one() + (-v).exp()));
        self.push(t, Op::Sigmoid { x: x.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        self.push(t, Op::Tanh { x: x.0 })
    }

    /// Row softmax, stabilised by subtracting the row maximum. Columns whose
    /// `key_mask` entry is `false` get weight exactly zero; a row with every
    /// column masked becomes all zeros and is counted in
    /// [`Tape::fully_masked_rows`].
    pub fn softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(m) = key_mask {
            if m.len() != c {
                return Err(Error::shape("softmax", "mask length", c, m.len()));
            }
        }
        let valid = |j: usize| key_mask.is_none_or(|m| m[j]);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        let mut dead = 0;
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            let mut max = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if valid(j) && v > max {
                    max = v;
                }
            }
            if max == F::neg_infinity() {
                dead += 1;
                continue;
            }
            let mut total = F::zero();
            for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if valid(j) {
                    *o = (v - max).exp();
                    total = total + *o;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / total;
            }
        }
        self.fully_masked_rows += dead;
        Ok(self.push(matrix(r, c, out), Op::Softmax { x: x.0 }))
    }

    /// Per-row standardisation followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (r, c) = self.dims(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        if g.len() != c {
            return Err(Error::shape("layer_norm", "gamma length", c, g.len()));
        }
        if b.len() != c {
            return Err(Error::shape("layer_norm", "beta length", c, b.len()));
        }
        let src = self.value(x).data();
        let n = F::of(c as f64);
        let mut xhat = vec![F::zero(); r * c];
        let mut inv_std = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().fold(F::zero(), |s, &v| s + v) / n;
            let var = row.iter().fold(F::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(matrix(r, c, out), Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std }))
    }

    /// Inverted dropout. Returns `x` itself when not training or when
    /// `rate == 0`, so evaluation never touches the generator.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let (r, c) = self.dims(x);
        let mask: Vec<F> = (0..r * c).map(|_| if rng.uniform() < rate { F::zero() } else { keep }).collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Ok(self.push(matrix(r, c, data), Op::Dropout { x: x.0, mask }))
    }

    /// Feature-axis concatenation.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape("concat_cols", "rows", rows, r));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(matrix(rows, total, out), Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c || len == 0 {
            return Err(Error::shape("slice_cols", "column range end", c, start + len));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src.row(i)[start..start + len]);
        }
        Ok(self.push(matrix(r, len, out), Op::SliceCols { x: x.0, start }))
    }

    /// Sequence-axis concatenation.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape("concat_rows", "columns", cols, c));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(matrix(rows, cols, out), Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r || len == 0 {
            return Err(Error::shape("slice_rows", "row range end", r, start + len));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(matrix(len, c, out), Op::SliceRows { x: x.0, start }))
    }

    /// One output row `[a_i, b_j]` per `(i, j)` in `pairs`; all ordered pairs
    /// in row-major order when `pairs` is `None`.
    pub fn pair_concat(&mut self, a: Var, b: Var, pairs: Option<Vec<(usize, usize)>>) -> Result<Var> {
        let (na, fa) = self.dims(a);
        let (nb, fb) = self.dims(b);
        let pairs = pairs.unwrap_or_else(|| (0..na).flat_map(|i| (0..nb).map(move |j| (i, j))).collect());
        if pairs.is_empty() {
            return Err(Error::Config("pair_concat needs at least one pair".into()));
        }
        let mut out = Vec::with_capacity(pairs.len() * (fa + fb));
        for &(i, j) in &pairs {
            if i >= na {
                return Err(Error::shape("pair_concat", "left row index bound", na, i + 1));
            }
            if j >= nb {
                return Err(Error::shape("pair_concat", "right row index bound", nb, j + 1));
            }
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(j));
        }
        Ok(self.push(matrix(pairs.len(), fa + fb, out), Op::PairConcat { a: a.0, b: b.0, pairs }))
    }

    /// `sum_r -ln(max(p[r, t_r], clamp))` for row distributions `p`.
    pub fn nll(&mut self, probs: Var, targets: &[usize], clamp: F) -> Result<Var> {
        let (r, c) = self.dims(probs);
        if targets.len() != r {
            return Err(Error::shape("nll", "target count", r, targets.len()));
        }
        let p = self.value(probs);
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::shape("nll", "class index bound", c, t + 1));
            }
            total = total - p.at(i, t).max(clamp).ln();
        }
        Ok(self.push(Tensor::scalar(total), Op::Nll { probs: probs.0, targets: targets.to_vec(), clamp }))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(F::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 })
    }

    /// Gradient of the scalar node `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss elements", 1, self.value(loss).len()));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (n, m) = (node.value.rows(), node.value.cols());
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let (_, k) = (self.nodes[*x].value.rows(), self.nodes[*x].value.cols());
                    let wv = self.nodes[*w].value.data();
                    let xv = self.nodes[*x].value.data();
                    gemm_nn(slot(&mut grads, &self.nodes, *x), &g, wv, n, m, k);
                    gemm_tn(slot(&mut grads, &self.nodes, *w), &g, xv, n, m, k);
                    if let Some(b) = b {
                        let db = slot(&mut grads, &self.nodes, *b);
                        for row in g.chunks(m) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let k = self.nodes[*a].value.cols();
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    gemm_nt(slot(&mut grads, &self.nodes, *a), &g, bv, n, m, k);
                    gemm_tn(slot(&mut grads, &self.nodes, *b), av, &g, n, k, m);
                }
                Op::MatMulT { a, b } => {
                    let k = self.nodes[*a].value.cols();
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    gemm_nn(slot(&mut grads, &self.nodes, *a), &g, bv, n, m, k);
                    gemm_tn(slot(&mut grads, &self.nodes, *b), &g, av, n, m, k);
                }
                Op::Add { a, b } => {
                    axpy(slot(&mut grads, &self.nodes, *a), &g, |v, _| v);
                    axpy(slot(&mut grads, &self.nodes, *b), &g, |v, _| v);
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    axpy(slot(&mut grads, &self.nodes, *a), &g, |v, i| v * bv[i]);
                    axpy(slot(&mut grads, &self.nodes, *b), &g, |v, i| v * av[i]);
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    axpy(slot(&mut grads, &self.nodes, *x), &g, |v, _| v * c);
                }
                Op::Div { x, c } => {
                    let c = *c;
                    axpy(slot(&mut grads, &self.nodes, *x), &g, |v, _| v / c);
                }
                Op::OneMinus { x } => {
                    axpy(slot(&mut grads, &self.nodes, *x), &g, |v, _| -v);
                }
                Op::Exp { x } => {
                    let y = node.value.data();
                    axpy(slot(&mut grads, &self.nodes, *x), &g, |v, i| v * y[i]);
                }
                Op::Relu { x } => {
                    let xv = self.nodes[*x].value.data();
                    axpy(slot(&mut grads, &self.nodes, *x), &g, |v, i| if xv[i] > F::zero() { v } else { F::zero() });
                }
                Op::Sigmoid { x } => {
                    let y = node.value.data();
                    axpy(slot(&mut grads, &self.nodes, *x), &g, |v, i| v * y[i] * (F::one() - y[i]));
                }
                Op::Tanh { x } => {
                    let y = node.value.data();
                    axpy(slot(&mut grads, &self.nodes, *x), &g, |v, i| v * (F::one() - y[i] * y[i]));
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let dx = slot(&mut grads, &self.nodes, *x);
                    for i in 0..n {
                        let yr = &y[i * m..(i + 1) * m];
                        let gr = &g[i * m..(i + 1) * m];
                        let dot = yr.iter().zip(gr).fold(F::zero(), |s, (&a, &b)| s + a * b);
                        for j in 0..m {
                            dx[i * m + j] = dx[i * m + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.nodes[*gamma].value.data().to_vec();
                    {
                        let dg = slot(&mut grads, &self.nodes, *gamma);
                        for i in 0..n {
                            for j in 0..m {
                                dg[j] = dg[j] + g[i * m + j] * xhat[i * m + j];
                            }
                        }
                    }
                    {
                        let db = slot(&mut grads, &self.nodes, *beta);
                        for i in 0..n {
                            for j in 0..m {
                                db[j] = db[j] + g[i * m + j];
                            }
                        }
                    }
                    let dx = slot(&mut grads, &self.nodes, *x);
                    let cm = F::of(m as f64);
                    for i in 0..n {
                        let mut mean_d = F::zero();
                        let mut mean_dh = F::zero();
                        for j in 0..m {
                            let d = g[i * m + j] * gv[j];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * xhat[i * m + j];
                        }
                        mean_d = mean_d / cm;
                        mean_dh = mean_dh / cm;
                        for j in 0..m {
                            let d = g[i * m + j] * gv[j];
                            dx[i * m + j] = dx[i * m + j] + inv_std[i] * (d - mean_d - xhat[i * m + j] * mean_dh);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    axpy(slot(&mut grads, &self.nodes, *x), &g, |v, i| v * mask[i]);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        let dp = slot(&mut grads, &self.nodes, p);
                        for i in 0..n {
                            for j in 0..w {
                                dp[i * w + j] = dp[i * w + j] + g[i * m + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let w = self.nodes[*x].value.cols();
                    let dx = slot(&mut grads, &self.nodes, *x);
                    for i in 0..n {
                        for j in 0..m {
                            dx[i * w + start + j] = dx[i * w + start + j] + g[i * m + j];
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.len();
                        let dp = slot(&mut grads, &self.nodes, p);
                        for (d, &v) in dp.iter_mut().zip(&g[offset..offset + len]) {
                            *d = *d + v;
                        }
                        offset += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    let dx = slot(&mut grads, &self.nodes, *x);
                    for (d, &v) in dx[start * m..].iter_mut().zip(&g) {
                        *d = *d + v;
                    }
                }
                Op::PairConcat { a, b, pairs } => {
                    let fa = self.nodes[*a].value.cols();
                    let fb = self.nodes[*b].value.cols();
                    {
                        let da = slot(&mut grads, &self.nodes, *a);
                        for (r, &(i, _)) in pairs.iter().enumerate() {
                            for j in 0..fa {
                                da[i * fa + j] = da[i * fa + j] + g[r * m + j];
                            }
                        }
                    }
                    let db = slot(&mut grads, &self.nodes, *b);
                    for (r, &(_, i)) in pairs.iter().enumerate() {
                        for j in 0..fb {
                            db[i * fb + j] = db[i * fb + j] + g[r * m + fa + j];
                        }
                    }
                }
                Op::Nll { probs, targets, clamp } => {
                    let p = &self.nodes[*probs].value;
                    let c = p.cols();
                    let pv = p.data().to_vec();
                    let dp = slot(&mut grads, &self.nodes, *probs);
                    for (i, &t) in targets.iter().enumerate() {
                        let v = pv[i * c + t];
                        if v > *clamp {
                            dp[i * c + t] = dp[i * c + t] - g[0] / v;
                        }
                    }
                }
                Op::Sum { x } => {
                    let g0 = g[0];
                    let dx = slot(&mut grads, &self.nodes, *x);
                    for d in dx.iter_mut() {
                        *d = *d + g0;
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn slot<'g, F: Real>(grads: &'g mut [Option<Vec<F>>], nodes: &[Node<F>], idx: usize) -> &'g mut [F] {
    grads[idx].get_or_insert_with(|| vec![F::zero(); nodes[idx].value.len()])
}

fn axpy<F: Real>(dst: &mut [F], g: &[F], f: impl Fn(F, usize) -> F) {
    for (i, (d, &v)) in dst.iter_mut().zip(g).enumerate() {
        *d = *d + f(v, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    /// Central differences of `f` at `x0` for every input entry.
    fn numeric_grad(x0: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.len())
            .map(|i| {
                let eval = |d: f64| {
                    let mut x = x0.clone();
                    x.data_mut()[i] += d;
                    let mut t = Tape::new();
                    let v = t.leaf(x);
                    let out = f(&mut t, v);
                    t.scalar(out)
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    fn check_unary(x0: Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var + Copy) {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let out = f(&mut t, x);
        let g = t.backward(out).unwrap();
        let analytic = g.get(x).map(|s| s.to_vec()).unwrap_or(vec![0.0; x0.len()]);
        let numeric = numeric_grad(&x0, f);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-7 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn weights(t: &mut Tape<f64>, rows: usize, cols: usize, seed: f64) -> Var {
        let data = (0..rows * cols).map(|i| ((i as f64 + 1.0) * seed).sin()).collect();
        t.leaf(Tensor::new(vec![rows, cols], data).unwrap())
    }

    fn x0() -> Tensor<f64> {
        m(&[&[0.3, -1.2, 0.7], &[1.5, 0.2, -0.4]])
    }

    #[test]
    fn linear_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::vector(&[1.0, 0.0]));
        let w = t.leaf(m(&[&[2.0, 3.0], &[4.0, 5.0]]));
        let b = t.leaf(Tensor::vector(&[0.0, 0.0]));
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 4.0]);

        let z = t.leaf(Tensor::vector(&[0.0, 0.0]));
        let b2 = t.leaf(Tensor::vector(&[7.0, -1.0]));
        let y = t.linear(z, w, Some(b2)).unwrap();
        assert_eq!(t.value(y).data(), &[7.0, -1.0]);

        let x = t.leaf(Tensor::vector(&[1.0, 2.0]));
        let w = t.leaf(m(&[&[1.0, 1.0]]));
        let b = t.leaf(Tensor::vector(&[1.0]));
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[4.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_axis() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::vector(&[1.0, 2.0, 3.0]));
        let w = t.leaf(m(&[&[1.0, 1.0]]));
        let err = t.linear(x, w, None).unwrap_err();
        assert_eq!(err, Error::shape("linear", "input features", 2, 3));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::vector(&[0.0, 0.0]));
        let y = t.softmax(x, None).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
        let x = t.leaf(Tensor::vector(&[42.0]));
        let y = t.softmax(x, None).unwrap();
        assert_eq!(t.value(y).data(), &[1.0]);
        let x = t.leaf(Tensor::vector(&[1.0f64.ln(), 3.0f64.ln()]));
        let y = t.softmax(x, None).unwrap();
        assert_relative_eq!(t.value(y).data()[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(t.value(y).data()[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn softmax_masked_and_dead_rows() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(m(&[&[1.0, 5.0, 2.0], &[0.0, 0.0, 0.0]]));
        let y = t.softmax(x, Some(&[true, false, true])).unwrap();
        let v = t.value(y);
        assert_eq!(v.at(0, 1), 0.0);
        assert_relative_eq!(v.at(0, 0) + v.at(0, 2), 1.0, epsilon = 1e-15);
        assert_eq!(t.fully_masked_rows(), 0);
        let y = t.softmax(x, Some(&[false, false, false])).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(t.fully_masked_rows(), 2);
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::<f64>::new();
        let eps = 1e-5;
        let one3 = t.leaf(Tensor::vector(&[1.0; 3]));
        let zero3 = t.leaf(Tensor::vector(&[0.0; 3]));
        let x = t.leaf(Tensor::vector(&[0.0, 0.0, 0.0]));
        let y = t.layer_norm(x, one3, zero3, eps).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

        let one2 = t.leaf(Tensor::vector(&[1.0; 2]));
        let zero2 = t.leaf(Tensor::vector(&[0.0; 2]));
        let x = t.leaf(Tensor::vector(&[1.0, -1.0]));
        let y = t.layer_norm(x, one2, zero2, eps).unwrap();
        // mean 0, biased variance 1: y = x / sqrt(1 + eps)
        let expect = 1.0 / (1.0f64 + eps).sqrt();
        assert_relative_eq!(t.value(y).data()[0], expect, epsilon = 1e-15);
        assert_relative_eq!(t.value(y).data()[1], -expect, epsilon = 1e-15);

        let three = t.leaf(Tensor::vector(&[3.0; 2]));
        let x = t.leaf(Tensor::vector(&[5.0, 5.0]));
        let y = t.layer_norm(x, one2, three, eps).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 3.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = RngState::new(1);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(x0());
        assert_eq!(t.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(rng.position(), 0);
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(t.dropout(x, -0.1, false, &mut rng).is_err());
    }

    #[test]
    fn dropout_mean_concentrates() {
        // Each output is 0 or 2 with probability 1/2: mean 1, sd 1 per entry,
        // so the sample mean of 10^4 entries has sd 0.01.
        let mut rng = RngState::new(99);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::filled(&[100, 100], 1.0));
        let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = t.value(y).data().iter().sum::<f64>() / 1e4;
        assert!((mean - 1.0).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn dropout_is_reproducible() {
        let run = || {
            let mut rng = RngState::new(5);
            let mut t = Tape::<f64>::new();
            let x = t.leaf(x0());
            let y = t.dropout(x, 0.3, true, &mut rng).unwrap();
            t.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(x0(), |t, x| {
            let y = t.sigmoid(x);
            t.sum(y)
        });
        check_unary(x0(), |t, x| {
            let y = t.tanh(x);
            let y = t.mul(y, x).unwrap();
            t.sum(y)
        });
        check_unary(x0(), |t, x| {
            let y = t.relu(x);
            let z = t.exp(x);
            let y = t.mul(y, z).unwrap();
            let y = t.one_minus(y);
            let y = t.scale(y, 0.7);
            t.sum(y)
        });
    }

    #[test]
    fn softmax_and_nll_gradients() {
        check_unary(x0(), |t, x| {
            let p = t.softmax(x, None).unwrap();
            t.nll(p, &[2, 0], 1e-12).unwrap()
        });
        check_unary(x0(), |t, x| {
            let p = t.softmax(x, Some(&[true, false, true])).unwrap();
            let w = weights(t, 2, 3, 0.9);
            let y = t.mul(p, w).unwrap();
            t.sum(y)
        });
    }

    #[test]
    fn layer_norm_gradient() {
        check_unary(x0(), |t, x| {
            let g = weights(t, 1, 3, 1.3);
            let b = weights(t, 1, 3, 0.4);
            let y = t.layer_norm(x, g, b, 1e-5).unwrap();
            let w = weights(t, 2, 3, 2.1);
            let y = t.mul(y, w).unwrap();
            t.sum(y)
        });
    }

    #[test]
    fn matmul_family_gradients() {
        check_unary(x0(), |t, x| {
            let w = weights(t, 4, 3, 0.7);
            let b = weights(t, 1, 4, 0.2);
            let y = t.linear(x, w, Some(b)).unwrap();
            let y = t.tanh(y);
            t.sum(y)
        });
        check_unary(x0(), |t, x| {
            let k = weights(t, 5, 3, 0.3);
            let s = t.matmul_t(x, k).unwrap();
            let v = weights(t, 5, 2, 1.1);
            let y = t.matmul(s, v).unwrap();
            let y = t.tanh(y);
            t.sum(y)
        });
        // gradient through both operands of matmul_t and matmul
        check_unary(x0(), |t, x| {
            let s = t.matmul_t(x, x).unwrap();
            let y = t.matmul(s, x).unwrap();
            let y = t.sigmoid(y);
            t.sum(y)
        });
    }

    #[test]
    fn structural_gradients() {
        check_unary(x0(), |t, x| {
            let a = t.slice_cols(x, 1, 2).unwrap();
            let b = t.slice_rows(x, 1, 1).unwrap();
            let bb = t.concat_rows(&[b, b]).unwrap();
            let c = t.concat_cols(&[a, bb]).unwrap();
            let w = weights(t, 2, 5, 0.8);
            let c = t.mul(c, w).unwrap();
            let c = t.tanh(c);
            t.sum(c)
        });
        check_unary(x0(), |t, x| {
            let y = t.scale(x, 0.5);
            let p = t.pair_concat(x, y, None).unwrap();
            let w = weights(t, 4, 6, 1.7);
            let p = t.mul(p, w).unwrap();
            let p = t.sigmoid(p);
            t.sum(p)
        });
    }

    #[test]
    fn pair_concat_layout() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(m(&[&[1.0], &[2.0]]));
        let b = t.leaf(m(&[&[10.0], &[20.0]]));
        let p = t.pair_concat(a, b, None).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 10.0, 1.0, 20.0, 2.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn unrelated_nodes_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(x0());
        let unused = t.leaf(x0());
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));
    }
}
