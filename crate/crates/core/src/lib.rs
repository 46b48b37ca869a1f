//! Multimodal emotion recognition in conversation.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation: a small reverse-mode autodiff tape, the layers the model is
//! built from, the fusion model itself, losses, metrics, the optimizer and
//! the training loop. File formats and the command-line driver live in the
//! companion `erc` crate.
//!
//! Model outline, per conversation:
//!
//! 1. every modality stream is projected to a common width and contextually
//!    encoded by a bidirectional-GRU block whose parameters are shared by all
//!    three streams ([`rume`]);
//! 2. the streams are fused by a text-centric cross-modal attention encoder
//!    ([`acme`]), or by a plain transformer encoder baseline;
//! 3. the concatenated features are classified per utterance ([`heads`]);
//! 4. during training a second, independently-dropped-out pass of the fusion
//!    encoder feeds a pairwise emotion-shift classifier whose loss is added to
//!    the objective ([`objective`]).

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod acme;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rng;
pub mod rume;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use rng::RngState;
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
