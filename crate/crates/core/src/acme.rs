//! Attention-based cross-modal encoder, plus the plain transformer-encoder
//! fusion baselines it is compared against.
//!
//! One layer over streams `X^T, X^V, X^A` (stream 0 plays the textual role):
//!
//! ```text
//! X_sr^m      = LN(X^m + DP(MHA_m(X^m, X^m, X^m)))                 m ∈ {T,V,A}
//! X_c^{T←V}   = DP(MHA_tv(X_sr^T, X_sr^V, X_sr^V))
//! X_c^{T←A}   = DP(MHA_ta(X_sr^T, X_sr^A, X_sr^A))
//! X_cr^T      = LN(X^T + X_sr^T + ReLU(FC([X_c^{T←V}, X_c^{T←A}])))
//! X_cr^m      = LN(X^m + X_sr^m + DP(MHA_mt(X_sr^m, X_sr^T, X_sr^T)))  m ∈ {V,A}
//! X_fr^m      = LN(X^m + X_cr^m + FF_m(X_cr^m))
//! ```
//!
//! `X^m` is the layer's own input. No parameters are shared between streams.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, Pass};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::tape::Var;
use crate::tensor::Real;

const STREAMS: [&str; 3] = ["text", "visual", "audio"];

#[derive(Clone, Debug)]
pub struct CrossModalLayer {
    pub self_attn: [MultiHeadAttention; 3],
    pub text_from_visual: MultiHeadAttention,
    pub text_from_audio: MultiHeadAttention,
    pub visual_from_text: MultiHeadAttention,
    pub audio_from_text: MultiHeadAttention,
    pub text_merge: Linear,
    pub ff: [FeedForward; 3],
    pub norm_self: [LayerNorm; 3],
    pub norm_cross: [LayerNorm; 3],
    pub norm_ff: [LayerNorm; 3],
}

fn per_stream<T>(mut f: impl FnMut(&str) -> Result<T>) -> Result<[T; 3]> {
    let [a, b, c] = STREAMS;
    Ok([f(a)?, f(b)?, f(c)?])
}

impl CrossModalLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let self_attn = per_stream(|s| MultiHeadAttention::new(store, &format!("{name}.self.{s}"), dim, heads, rng))?;
        let text_from_visual =
            MultiHeadAttention::new(store, &format!("{name}.cross.text_from_visual"), dim, heads, rng)?;
        let text_from_audio =
            MultiHeadAttention::new(store, &format!("{name}.cross.text_from_audio"), dim, heads, rng)?;
        let visual_from_text =
            MultiHeadAttention::new(store, &format!("{name}.cross.visual_from_text"), dim, heads, rng)?;
        let audio_from_text =
            MultiHeadAttention::new(store, &format!("{name}.cross.audio_from_text"), dim, heads, rng)?;
        let text_merge = Linear::new(store, &format!("{name}.cross.text_merge"), 2 * dim, dim, rng)?;
        let ff = per_stream(|s| FeedForward::new(store, &format!("{name}.ff.{s}"), dim, ff_dim, rng))?;
        let norm_self = per_stream(|s| LayerNorm::new(store, &format!("{name}.norm_self.{s}"), dim))?;
        let norm_cross = per_stream(|s| LayerNorm::new(store, &format!("{name}.norm_cross.{s}"), dim))?;
        let norm_ff = per_stream(|s| LayerNorm::new(store, &format!("{name}.norm_ff.{s}"), dim))?;
        Ok(CrossModalLayer {
            self_attn,
            text_from_visual,
            text_from_audio,
            visual_from_text,
            audio_from_text,
            text_merge,
            ff,
            norm_self,
            norm_cross,
            norm_ff,
        })
    }

    /// Global self-attention with residual for stream `m`.
    pub fn self_stage<F: Real>(
        &self,
        g: &mut Graph<F>,
        m: usize,
        x: Var,
        mask: Option<&[bool]>,
        dropout: f64,
        pass: &mut Pass,
    ) -> Result<Var> {
        let s = self.self_attn[m].forward(g, x, x, x, mask)?;
        let s = g.dropout(s, dropout, pass)?;
        let sum = g.tape.add(x, s)?;
        self.norm_self[m].forward(g, sum)
    }

    /// Text stream update from the visual and acoustic streams.
    #[allow(clippy::too_many_arguments)]
    pub fn cross_text<F: Real>(
        &self,
        g: &mut Graph<F>,
        sr: [Var; 3],
        x_text: Var,
        mask: Option<&[bool]>,
        dropout: f64,
        pass: &mut Pass,
    ) -> Result<Var> {
        let [t, v, a] = sr;
        let tv = self.text_from_visual.forward(g, t, v, v, mask)?;
        let tv = g.dropout(tv, dropout, pass)?;
        let ta = self.text_from_audio.forward(g, t, a, a, mask)?;
        let ta = g.dropout(ta, dropout, pass)?;
        let cat = g.tape.concat_cols(&[tv, ta])?;
        let c = self.text_merge.forward(g, cat)?;
        let c = g.tape.relu(c);
        let sum = g.tape.add_all(&[x_text, t, c])?;
        self.norm_cross[0].forward(g, sum)
    }

    /// Visual (`m == 1`) or acoustic (`m == 2`) stream update from text.
    #[allow(clippy::too_many_arguments)]
    pub fn cross_nontext<F: Real>(
        &self,
        g: &mut Graph<F>,
        m: usize,
        sr_m: Var,
        sr_text: Var,
        x_m: Var,
        mask: Option<&[bool]>,
        dropout: f64,
        pass: &mut Pass,
    ) -> Result<Var> {
        let attn = if m == 1 { &self.visual_from_text } else { &self.audio_from_text };
        let c = attn.forward(g, sr_m, sr_text, sr_text, mask)?;
        let c = g.dropout(c, dropout, pass)?;
        let sum = g.tape.add_all(&[x_m, sr_m, c])?;
        self.norm_cross[m].forward(g, sum)
    }

    pub fn ff_stage<F: Real>(
        &self,
        g: &mut Graph<F>,
        m: usize,
        x_m: Var,
        cr_m: Var,
        dropout: f64,
        pass: &mut Pass,
    ) -> Result<Var> {
        let f = self.ff[m].forward(g, cr_m, dropout, pass)?;
        let sum = g.tape.add_all(&[x_m, cr_m, f])?;
        self.norm_ff[m].forward(g, sum)
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        x: [Var; 3],
        mask: Option<&[bool]>,
        dropout: f64,
        pass: &mut Pass,
    ) -> Result<[Var; 3]> {
        let mut sr = x;
        for m in 0..3 {
            sr[m] = self.self_stage(g, m, x[m], mask, dropout, pass)?;
        }
        let cr_t = self.cross_text(g, sr, x[0], mask, dropout, pass)?;
        let cr_v = self.cross_nontext(g, 1, sr[1], sr[0], x[1], mask, dropout, pass)?;
        let cr_a = self.cross_nontext(g, 2, sr[2], sr[0], x[2], mask, dropout, pass)?;
        let cr = [cr_t, cr_v, cr_a];
        let mut out = cr;
        for m in 0..3 {
            out[m] = self.ff_stage(g, m, x[m], cr[m], dropout, pass)?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct CrossModalEncoder {
    pub layers: Vec<CrossModalLayer>,
    pub dropout: f64,
}

impl CrossModalEncoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        depth: usize,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        dropout: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|l| CrossModalLayer::new(store, &format!("acme.{l}"), dim, heads, ff_dim, rng))
            .collect::<Result<_>>()?;
        Ok(CrossModalEncoder { layers, dropout })
    }

    /// Returns `(H^T, H^V, H^A)`.
    pub fn encode<F: Real>(
        &self,
        g: &mut Graph<F>,
        streams: [Var; 3],
        mask: Option<&[bool]>,
        pass: &mut Pass,
    ) -> Result<[Var; 3]> {
        self.layers.iter().try_fold(streams, |h, layer| layer.forward(g, h, mask, self.dropout, pass))
    }
}

/// How the transformer baseline combines the three streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TfeScheme {
    /// Streams stacked along the sequence axis: `3|U| x D`.
    #[serde(rename = "TFE1")]
    Sequence,
    /// Streams concatenated along the feature axis: `|U| x 3D`.
    #[serde(rename = "TFE2")]
    Feature,
}

impl TfeScheme {
    /// Encoder input shape for `n` utterances of width `dim`.
    pub fn input_shape(self, n: usize, dim: usize) -> (usize, usize) {
        match self {
            TfeScheme::Sequence => (3 * n, dim),
            TfeScheme::Feature => (n, 3 * dim),
        }
    }
}

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub norm_attn: LayerNorm,
    pub ff: FeedForward,
    pub norm_ff: LayerNorm,
}

impl TransformerLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim)?,
        })
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        x: Var,
        mask: Option<&[bool]>,
        dropout: f64,
        pass: &mut Pass,
    ) -> Result<Var> {
        let a = self.attn.forward(g, x, x, x, mask)?;
        let a = g.dropout(a, dropout, pass)?;
        let s = g.tape.add(x, a)?;
        let h = self.norm_attn.forward(g, s)?;
        let f = self.ff.forward(g, h, dropout, pass)?;
        let s = g.tape.add(h, f)?;
        self.norm_ff.forward(g, s)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerFusion {
    pub scheme: TfeScheme,
    pub layers: Vec<TransformerLayer>,
    pub dropout: f64,
}

impl TransformerFusion {
    /// `dim` is the per-stream width; the feature scheme runs at `3 * dim`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        scheme: TfeScheme,
        depth: usize,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        dropout: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        let width = scheme.input_shape(1, dim).1;
        let layers = (0..depth)
            .map(|l| TransformerLayer::new(store, &format!("tfe.{l}"), width, heads, ff_mult * width, rng))
            .collect::<Result<_>>()?;
        Ok(TransformerFusion { scheme, layers, dropout })
    }

    /// Arranges the streams into the encoder input.
    pub fn arrange<F: Real>(&self, g: &mut Graph<F>, streams: [Var; 3]) -> Result<Var> {
        match self.scheme {
            TfeScheme::Sequence => g.tape.concat_rows(&streams),
            TfeScheme::Feature => g.tape.concat_cols(&streams),
        }
    }

    /// Fused `|U| x 3D` features.
    pub fn encode<F: Real>(
        &self,
        g: &mut Graph<F>,
        streams: [Var; 3],
        mask: Option<&[bool]>,
        pass: &mut Pass,
    ) -> Result<Var> {
        let n = g.value(streams[0]).rows();
        let x = self.arrange(g, streams)?;
        let seq_mask: Option<Vec<bool>> = match (self.scheme, mask) {
            (TfeScheme::Sequence, Some(m)) => Some(m.iter().chain(m).chain(m).copied().collect()),
            (_, m) => m.map(<[bool]>::to_vec),
        };
        let h =
            self.layers.iter().try_fold(x, |h, layer| layer.forward(g, h, seq_mask.as_deref(), self.dropout, pass))?;
        match self.scheme {
            TfeScheme::Sequence => {
                let parts = [g.tape.slice_rows(h, 0, n)?, g.tape.slice_rows(h, n, n)?, g.tape.slice_rows(h, 2 * n, n)?];
                g.tape.concat_cols(&parts)
            }
            TfeScheme::Feature => Ok(h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::vec;

    const D: usize = 8;

    fn input(rows: usize, seed: u64) -> Tensor<f64> {
        let mut r = RngState::new(seed);
        Tensor::new(vec![rows, D], (0..rows * D).map(|_| r.normal()).collect()).unwrap()
    }

    fn layer() -> (ParamStore<f64>, CrossModalLayer) {
        let mut store = ParamStore::new();
        let l = CrossModalLayer::new(&mut store, "l", D, 2, 4 * D, &mut RngState::new(11)).unwrap();
        (store, l)
    }

    fn zero(store: &mut ParamStore<f64>, id: crate::ParamId) {
        store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    #[test]
    fn single_utterance_self_stage_is_value_projection() {
        let (store, l) = layer();
        let mut g = Graph::new(&store);
        let x = g.input(input(1, 1));
        let y = l.self_stage(&mut g, 0, x, None, 0.0, &mut Pass::eval()).unwrap();
        let v = l.self_attn[0].value.forward(&mut g, x).unwrap();
        let p = l.self_attn[0].output.forward(&mut g, v).unwrap();
        let s = g.tape.add(x, p).unwrap();
        let expect = l.norm_self[0].forward(&mut g, s).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-15);
    }

    #[test]
    fn layer_is_row_permutation_equivariant() {
        let (store, l) = layer();
        let xs = [input(4, 1), input(4, 2), input(4, 3)];
        let perm = [3usize, 1, 0, 2];
        let permute = |m: &Tensor<f64>| {
            let rows: Vec<&[f64]> = perm.iter().map(|&p| m.row(p)).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let mut g = Graph::new(&store);
        let a = xs.clone().map(|x| g.input(x));
        let b = xs.clone().map(|x| g.input(permute(&x)));
        let ya = l.forward(&mut g, a, None, 0.0, &mut Pass::eval()).unwrap();
        let yb = l.forward(&mut g, b, None, 0.0, &mut Pass::eval()).unwrap();
        for m in 0..3 {
            assert!(permute(g.value(ya[m])).max_abs_diff(g.value(yb[m])) < 1e-12);
        }
    }

    #[test]
    fn zero_value_projections_isolate_residuals() {
        let (mut store, l) = layer();
        for mha in [&l.text_from_visual, &l.text_from_audio, &l.visual_from_text, &l.audio_from_text] {
            zero(&mut store, mha.value.weight);
            zero(&mut store, mha.value.bias);
            zero(&mut store, mha.output.bias);
        }
        zero(&mut store, l.text_merge.bias);
        let mut g = Graph::new(&store);
        let x = [input(3, 1), input(3, 2), input(3, 3)].map(|t| g.input(t));
        let mut pass = Pass::eval();
        let sr = [0, 1, 2].map(|m| l.self_stage(&mut g, m, x[m], None, 0.0, &mut pass).unwrap());
        let cr_t = l.cross_text(&mut g, sr, x[0], None, 0.0, &mut pass).unwrap();
        let cr_v = l.cross_nontext(&mut g, 1, sr[1], sr[0], x[1], None, 0.0, &mut pass).unwrap();
        let s = g.tape.add(x[0], sr[0]).unwrap();
        let expect_t = l.norm_cross[0].forward(&mut g, s).unwrap();
        let s = g.tape.add(x[1], sr[1]).unwrap();
        let expect_v = l.norm_cross[1].forward(&mut g, s).unwrap();
        assert_eq!(g.value(cr_t), g.value(expect_t));
        assert_eq!(g.value(cr_v), g.value(expect_v));
        assert_eq!(g.value(cr_t).shape(), &[3, D]);
    }

    #[test]
    fn zero_ff_weights_isolate_residual() {
        let (mut store, l) = layer();
        for lin in [&l.ff[2].expand, &l.ff[2].project] {
            zero(&mut store, lin.weight);
            zero(&mut store, lin.bias);
        }
        let mut g = Graph::new(&store);
        let (x, cr) = (g.input(input(3, 4)), g.input(input(3, 5)));
        let y = l.ff_stage(&mut g, 2, x, cr, 0.0, &mut Pass::eval()).unwrap();
        let s = g.tape.add(x, cr).unwrap();
        let expect = l.norm_ff[2].forward(&mut g, s).unwrap();
        assert_eq!(g.value(y), g.value(expect));
    }

    #[test]
    fn visual_and_audio_paths_share_the_formula() {
        let (mut store, l) = layer();
        for (dst, src) in [
            (&l.audio_from_text.query, &l.visual_from_text.query),
            (&l.audio_from_text.key, &l.visual_from_text.key),
            (&l.audio_from_text.value, &l.visual_from_text.value),
            (&l.audio_from_text.output, &l.visual_from_text.output),
        ] {
            for (d, s) in [(dst.weight, src.weight), (dst.bias, src.bias)] {
                let v = store.get(s).value.clone();
                store.get_mut(d).value = v;
            }
        }
        let mut g = Graph::new(&store);
        let (m, t, x) = (g.input(input(3, 1)), g.input(input(3, 2)), g.input(input(3, 3)));
        let mut pass = Pass::eval();
        let v = l.cross_nontext(&mut g, 1, m, t, x, None, 0.0, &mut pass).unwrap();
        let a = l.cross_nontext(&mut g, 2, m, t, x, None, 0.0, &mut pass).unwrap();
        assert_eq!(g.value(v), g.value(a));
    }

    /// Text update assembled by hand from the attention primitive and
    /// explicit affine maps.
    #[test]
    fn cross_text_matches_manual_composition() {
        let (store, l) = layer();
        let mut g = Graph::new(&store);
        let sr = [input(2, 1), input(2, 2), input(2, 3)].map(|t| g.input(t));
        let xt = g.input(input(2, 4));
        let got = l.cross_text(&mut g, sr, xt, None, 0.0, &mut Pass::eval()).unwrap();

        let tv = l.text_from_visual.forward(&mut g, sr[0], sr[1], sr[1], None).unwrap();
        let ta = l.text_from_audio.forward(&mut g, sr[0], sr[2], sr[2], None).unwrap();
        let (tv, ta) = (g.value(tv).clone(), g.value(ta).clone());
        let w = store.get(l.text_merge.weight).value.clone();
        let b = store.get(l.text_merge.bias).value.clone();
        let gamma = store.get(l.norm_cross[0].gamma).value.clone();
        let beta = store.get(l.norm_cross[0].beta).value.clone();
        for i in 0..2 {
            let cat: Vec<f64> = tv.row(i).iter().chain(ta.row(i)).copied().collect();
            let c: Vec<f64> =
                (0..D).map(|o| (b.data()[o] + (0..2 * D).map(|k| w.at(o, k) * cat[k]).sum::<f64>()).max(0.0)).collect();
            let s: Vec<f64> = (0..D).map(|j| g.value(xt).at(i, j) + g.value(sr[0]).at(i, j) + c[j]).collect();
            let mean = s.iter().sum::<f64>() / D as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / D as f64;
            for j in 0..D {
                let e = gamma.data()[j] * (s[j] - mean) / (var + crate::nn::LAYER_NORM_EPS).sqrt() + beta.data()[j];
                assert!((g.value(got).at(i, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_depth_one_equals_layer_and_is_deterministic() {
        let mut store = ParamStore::<f64>::new();
        let enc = CrossModalEncoder::new(&mut store, 1, D, 2, 4 * D, 0.3, &mut RngState::new(2)).unwrap();
        let mut g = Graph::new(&store);
        let x = [input(3, 1), input(3, 2), input(3, 3)].map(|t| g.input(t));
        let a = enc.encode(&mut g, x, None, &mut Pass::eval()).unwrap();
        let b = enc.encode(&mut g, x, None, &mut Pass::eval()).unwrap();
        let c = enc.layers[0].forward(&mut g, x, None, 0.3, &mut Pass::eval()).unwrap();
        for m in 0..3 {
            assert_eq!(g.value(a[m]), g.value(b[m]));
            assert_eq!(g.value(a[m]), g.value(c[m]));
            assert_eq!(g.value(a[m]).shape(), &[3, D]);
        }
    }

    #[test]
    fn deep_encoders_accepted() {
        for depth in [3, 5] {
            let mut store = ParamStore::<f32>::new();
            let enc = CrossModalEncoder::new(&mut store, depth, D, 2, 4 * D, 0.3, &mut RngState::new(2)).unwrap();
            assert_eq!(enc.layers.len(), depth);
        }
    }

    #[test]
    fn tfe_input_shapes() {
        assert_eq!(TfeScheme::Sequence.input_shape(3, 4), (9, 4));
        assert_eq!(TfeScheme::Feature.input_shape(3, 4), (3, 12));
        let mut store = ParamStore::<f64>::new();
        let mut rng = RngState::new(1);
        let t1 = TransformerFusion::new(&mut store, TfeScheme::Sequence, 1, 4, 2, 4, 0.0, &mut rng).unwrap();
        let mut other = ParamStore::<f64>::new();
        let t2 = TransformerFusion::new(&mut other, TfeScheme::Feature, 1, 4, 2, 4, 0.0, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let streams = [1, 2, 3].map(|s| {
            let mut r = RngState::new(s);
            g.input(Tensor::new(vec![3, 4], (0..12).map(|_| r.normal()).collect()).unwrap())
        });
        let seq = t1.arrange(&mut g, streams).unwrap();
        assert_eq!(g.value(seq).shape(), &[9, 4]);
        let feat = t2.arrange(&mut g, streams).unwrap();
        assert_eq!(g.value(feat).shape(), &[3, 12]);
        let h = t1.encode(&mut g, streams, None, &mut Pass::eval()).unwrap();
        assert_eq!(g.value(h).shape(), &[3, 12]);
    }

    #[test]
    fn tfe_feature_single_utterance() {
        let mut store = ParamStore::<f64>::new();
        let t2 =
            TransformerFusion::new(&mut store, TfeScheme::Feature, 2, 4, 2, 4, 0.0, &mut RngState::new(3)).unwrap();
        let mut g = Graph::new(&store);
        let streams = [1, 2, 3].map(|s| {
            let mut r = RngState::new(s);
            g.input(Tensor::new(vec![1, 4], (0..4).map(|_| r.normal()).collect()).unwrap())
        });
        let h = t2.encode(&mut g, streams, None, &mut Pass::eval()).unwrap();
        assert_eq!(g.value(h).shape(), &[1, 12]);
        assert!(g.value(h).all_finite());
    }
}
