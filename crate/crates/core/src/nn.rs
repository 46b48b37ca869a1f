//! Layers shared by the encoders and heads.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::RngState;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// One forward pass worth of recorded operations, with every parameter of a
/// store bound as a leaf.
pub struct Graph<F> {
    pub tape: Tape<F>,
    bound: Bound,
}

impl<F: Real> Graph<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        Graph { tape, bound }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.tape.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.tape.value(v)
    }

    pub fn bound(&self) -> &Bound {
        &self.bound
    }

    pub fn dropout(&mut self, x: Var, rate: f64, pass: &mut Pass) -> Result<Var> {
        let train = pass.train;
        self.tape.dropout(x, rate, train, &mut pass.rng)
    }

    /// Runs backward from `loss` and adds parameter gradients into `store`.
    pub fn accumulate_into(&self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        let grads = self.tape.backward(loss)?;
        store.accumulate(&grads, &self.bound);
        Ok(())
    }
}

/// Train/eval switch plus the generator that feeds dropout masks.
#[derive(Clone, Debug)]
pub struct Pass {
    train: bool,
    rng: RngState,
}

impl Pass {
    pub fn train(rng: RngState) -> Self {
        Pass { train: true, rng }
    }

    pub fn eval() -> Self {
        Pass { train: false, rng: RngState::new(0) }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn rng(&self) -> &RngState {
        &self.rng
    }

    pub fn rng_mut(&mut self) -> &mut RngState {
        &mut self.rng
    }
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let weight = store.add_xavier(format!("{name}.weight"), d_out, d_in, rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), &[d_out])?;
        Ok(Linear { weight, bias, d_in, d_out })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.tape.linear(x, w, Some(b))
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add_ones(format!("{name}.gamma"), &[dim])?,
            beta: store.add_zeros(format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.tape.layer_norm(x, gamma, beta, F::of(LAYER_NORM_EPS))
    }
}

/// `DP(FC(DP(ReLU(FC(x)))))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: Linear,
    pub project: Linear,
}

impl FeedForward {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(FeedForward {
            expand: Linear::new(store, &format!("{name}.expand"), dim, hidden, rng)?,
            project: Linear::new(store, &format!("{name}.project"), hidden, dim, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var, dropout: f64, pass: &mut Pass) -> Result<Var> {
        let h = self.expand.forward(g, x)?;
        let h = g.tape.relu(h);
        let h = g.dropout(h, dropout, pass)?;
        let y = self.project.forward(g, h)?;
        g.dropout(y, dropout, pass)
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V`, with keys whose mask entry is `false`
/// excluded from the normalisation.
pub fn scaled_dot_attention<F: Real>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let d_k = tape.value(q).cols();
    let (kr, kc) = (tape.value(k).rows(), tape.value(k).cols());
    if kc != d_k {
        return Err(Error::shape("scaled_dot_attention", "key width", d_k, kc));
    }
    let vr = tape.value(v).rows();
    if vr != kr {
        return Err(Error::shape("scaled_dot_attention", "value rows", kr, vr));
    }
    let scores = tape.matmul_t(q, k)?;
    let scores = tape.scale(scores, F::of(1.0 / libm::sqrt(d_k as f64)));
    let weights = tape.softmax(scores, key_mask)?;
    tape.matmul(weights, v)
}

/// Multi-head attention: per-head projections of query, key and value,
/// scaled dot-product attention per head, concatenation and an output
/// projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model dimension {dim} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        query: Var,
        key: Var,
        value: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.query.forward(g, query)?;
        let k = self.key.forward(g, key)?;
        let v = self.value.forward(g, value)?;
        let width = self.dim / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.tape.slice_cols(q, h * width, width)?,
                    g.tape.slice_cols(k, h * width, width)?,
                    g.tape.slice_cols(v, h * width, width)?,
                )
            };
            heads.push(scaled_dot_attention(&mut g.tape, qh, kh, vh, key_mask)?);
        }
        let cat = if self.heads == 1 { heads[0] } else { g.tape.concat_cols(&heads)? };
        self.output.forward(g, cat)
    }
}

/// GRU cell with gate order (reset, update, candidate):
///
/// ```text
/// r = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub b_ih: ParamId,
    pub w_hh: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let bound = 1.0 / libm::sqrt(hidden as f64);
        Ok(GruCell {
            w_ih: store.add_uniform(format!("{name}.w_ih"), &[3 * hidden, d_in], bound, rng)?,
            b_ih: store.add_uniform(format!("{name}.b_ih"), &[3 * hidden], bound, rng)?,
            w_hh: store.add_uniform(format!("{name}.w_hh"), &[3 * hidden, hidden], bound, rng)?,
            b_hh: store.add_uniform(format!("{name}.b_hh"), &[3 * hidden], bound, rng)?,
            hidden,
        })
    }

    /// Runs over the rows of `x` (first to last, or last to first when
    /// `reverse`) from a zero state. Row `t` of the result is the state after
    /// consuming row `t`.
    pub fn run<F: Real>(&self, g: &mut Graph<F>, x: Var, reverse: bool) -> Result<Var> {
        let n = g.value(x).rows();
        let hsz = self.hidden;
        let (w_ih, b_ih, w_hh, b_hh) = (g.param(self.w_ih), g.param(self.b_ih), g.param(self.w_hh), g.param(self.b_hh));
        let gx = g.tape.linear(x, w_ih, Some(b_ih))?;
        let mut h = g.input(Tensor::zeros(&[1, hsz]));
        let mut states = alloc::vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let t_ = &mut g.tape;
            let gx_t = t_.slice_rows(gx, t, 1)?;
            let gh = t_.linear(h, w_hh, Some(b_hh))?;
            let xr = t_.slice_cols(gx_t, 0, hsz)?;
            let hr = t_.slice_cols(gh, 0, hsz)?;
            let xz = t_.slice_cols(gx_t, hsz, hsz)?;
            let hz = t_.slice_cols(gh, hsz, hsz)?;
            let xn = t_.slice_cols(gx_t, 2 * hsz, hsz)?;
            let hn = t_.slice_cols(gh, 2 * hsz, hsz)?;
            let r = t_.add(xr, hr)?;
            let r = t_.sigmoid(r);
            let z = t_.add(xz, hz)?;
            let z = t_.sigmoid(z);
            let rn = t_.mul(r, hn)?;
            let cand = t_.add(xn, rn)?;
            let cand = t_.tanh(cand);
            let keep = t_.one_minus(z);
            let a = t_.mul(keep, cand)?;
            let b = t_.mul(z, h)?;
            h = t_.add(a, b)?;
            states[t] = h;
        }
        g.tape.concat_rows(&states)
    }
}

/// Bidirectional GRU; each direction has half the output width and the two
/// state sequences are concatenated per row.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
}

impl BiGru {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if !d_out.is_multiple_of(2) || d_out == 0 {
            return Err(Error::Config(format!("bidirectional GRU output width must be even, got {d_out}")));
        }
        Ok(BiGru {
            forward: GruCell::new(store, &format!("{name}.fwd"), d_in, d_out / 2, rng)?,
            backward: GruCell::new(store, &format!("{name}.bwd"), d_in, d_out / 2, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let f = self.forward.run(g, x, false)?;
        let b = self.backward.run(g, x, true)?;
        g.tape.concat_cols(&[f, b])
    }
}
