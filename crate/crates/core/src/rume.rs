//! Recurrence-based unimodal encoder.
//!
//! Each layer computes
//!
//! ```text
//! X_rr = LN(X + BiGRU(X))
//! X_fr = LN(X + X_rr + FF(X_rr))
//! ```
//!
//! and one set of layer parameters is applied to all three streams. Only the
//! input projections, which bring each modality to the common width, are
//! modality specific.

use alloc::format;
use alloc::vec::Vec;

use crate::data::Modality;
use crate::error::Result;
use crate::nn::{BiGru, FeedForward, Graph, LayerNorm, Linear, Pass};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::tape::Var;
use crate::tensor::Real;

/// Per-modality maps from feature width to the model width.
#[derive(Clone, Debug)]
pub struct InputProjections {
    pub text: Linear,
    pub visual: Linear,
    pub audio: Linear,
}

impl InputProjections {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        dims: [usize; 3],
        model_dim: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(InputProjections {
            text: Linear::new(store, "input.text", dims[0], model_dim, rng)?,
            visual: Linear::new(store, "input.visual", dims[1], model_dim, rng)?,
            audio: Linear::new(store, "input.audio", dims[2], model_dim, rng)?,
        })
    }

    pub fn get(&self, m: Modality) -> &Linear {
        match m {
            Modality::Text => &self.text,
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RumeLayer {
    pub rnn: BiGru,
    pub norm_rnn: LayerNorm,
    pub ff: FeedForward,
    pub norm_out: LayerNorm,
}

impl RumeLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        ff_dim: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(RumeLayer {
            rnn: BiGru::new(store, &format!("{name}.gru"), dim, dim, rng)?,
            norm_rnn: LayerNorm::new(store, &format!("{name}.norm_rnn"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng)?,
            norm_out: LayerNorm::new(store, &format!("{name}.norm_out"), dim)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var, dropout: f64, pass: &mut Pass) -> Result<Var> {
        let r = self.rnn.forward(g, x)?;
        let s = g.tape.add(x, r)?;
        let x_rr = self.norm_rnn.forward(g, s)?;
        let f = self.ff.forward(g, x_rr, dropout, pass)?;
        let s = g.tape.add_all(&[x, x_rr, f])?;
        self.norm_out.forward(g, s)
    }
}

#[derive(Clone, Debug)]
pub struct RecurrentEncoder {
    pub layers: Vec<RumeLayer>,
    pub dropout: f64,
}

impl RecurrentEncoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        depth: usize,
        dim: usize,
        ff_dim: usize,
        dropout: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        let layers =
            (0..depth).map(|l| RumeLayer::new(store, &format!("rume.{l}"), dim, ff_dim, rng)).collect::<Result<_>>()?;
        Ok(RecurrentEncoder { layers, dropout })
    }

    /// Encodes one stream through every layer.
    pub fn encode_stream<F: Real>(&self, g: &mut Graph<F>, x: Var, pass: &mut Pass) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(g, h, self.dropout, pass))
    }

    /// Encodes all three streams; at every depth the same layer is applied to
    /// each stream in turn.
    pub fn encode<F: Real>(&self, g: &mut Graph<F>, streams: [Var; 3], pass: &mut Pass) -> Result<[Var; 3]> {
        let mut h = streams;
        for layer in &self.layers {
            for s in h.iter_mut() {
                *s = layer.forward(g, *s, self.dropout, pass)?;
            }
        }
        Ok(h)
    }
}
