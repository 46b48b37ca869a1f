//! Batch-normalised cross-entropy losses.
//!
//! The classification loss divides the summed negative log-likelihood of
//! every utterance in the batch by `Σ n(I)`, the total utterance count; the
//! shift loss divides the summed pairwise terms by `Σ n(I)²`, the total
//! number of ordered pairs. Probabilities are clamped at [`LOG_CLAMP`]
//! before the logarithm.

use alloc::vec::Vec;

use crate::data::ShiftLabelMatrix;
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::params::ParamStore;
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

pub const LOG_CLAMP: f64 = 1e-12;

/// Mean negative log-likelihood over all rows of all `(probs, targets)`
/// items. Returns the loss node and the row count used as denominator.
pub fn batch_nll<F: Real>(g: &mut Graph<F>, items: &[(Var, &[usize])]) -> Result<(Var, usize)> {
    let mut terms = Vec::with_capacity(items.len());
    let mut count = 0;
    for &(p, t) in items {
        terms.push(g.tape.nll(p, t, F::of(LOG_CLAMP))?);
        count += t.len();
    }
    if count == 0 {
        return Err(Error::Config("loss over an empty batch".into()));
    }
    let total = g.tape.add_all(&terms)?;
    Ok((g.tape.div_scalar(total, F::of(count as f64)), count))
}

/// `L_c` over per-dialogue `(|U| x |E|` probabilities, gold labels`)`.
pub fn classification_loss<F: Real>(g: &mut Graph<F>, dialogues: &[(Var, &[usize])]) -> Result<Var> {
    batch_nll(g, dialogues).map(|(l, _)| l)
}

/// `L_s` over per-dialogue `(|U|² x 2` probabilities, flattened shift
/// labels`)`. Pairs are in row-major `(i, j)` order.
pub fn shift_loss<F: Real>(g: &mut Graph<F>, dialogues: &[(Var, &[usize])]) -> Result<Var> {
    batch_nll(g, dialogues).map(|(l, _)| l)
}

/// Value-level `L_c` for precomputed probabilities.
pub fn loss_classification<F: Real>(probs: &[Tensor<F>], gold: &[Vec<usize>]) -> Result<F> {
    if probs.len() != gold.len() {
        return Err(Error::shape("loss_classification", "dialogues", probs.len(), gold.len()));
    }
    let mut g = Graph::new(&ParamStore::new());
    let items: Vec<(Var, &[usize])> = probs.iter().zip(gold).map(|(p, y)| (g.input(p.clone()), y.as_slice())).collect();
    let l = classification_loss(&mut g, &items)?;
    Ok(g.tape.scalar(l))
}

/// Value-level `L_s`; each `z` is `|U| x |U| x 2` (or `|U|² x 2`).
pub fn loss_shift<F: Real>(z: &[Tensor<F>], labels: &[ShiftLabelMatrix]) -> Result<F> {
    if z.len() != labels.len() {
        return Err(Error::shape("loss_shift", "dialogues", z.len(), labels.len()));
    }
    let targets: Vec<Vec<usize>> = labels.iter().map(ShiftLabelMatrix::targets).collect();
    let mut g = Graph::new(&ParamStore::new());
    let items: Vec<(Var, &[usize])> = z.iter().zip(&targets).map(|(p, t)| (g.input(p.clone()), t.as_slice())).collect();
    let l = shift_loss(&mut g, &items)?;
    Ok(g.tape.scalar(l))
}
