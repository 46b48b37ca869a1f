//! Emotion classifier and the pairwise emotion-shift head.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, Pass};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// `softmax(W_out · DP(ReLU(W_hidden · x)))`, shared shape for both heads.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl MlpHead {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        classes: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("{name} needs at least 2 classes, got {classes}")));
        }
        Ok(MlpHead {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, d_hidden, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d_hidden, classes, rng)?,
        })
    }

    pub fn logits<F: Real>(&self, g: &mut Graph<F>, x: Var, dropout: f64, pass: &mut Pass) -> Result<Var> {
        let l = self.hidden.forward(g, x)?;
        let l = g.tape.relu(l);
        let l = g.dropout(l, dropout, pass)?;
        self.out.forward(g, l)
    }

    /// Row distributions over classes.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var, dropout: f64, pass: &mut Pass) -> Result<Var> {
        let z = self.logits(g, x, dropout, pass)?;
        g.tape.softmax(z, None)
    }
}

/// Per-utterance emotion classifier over fused features.
pub type EmotionClassifier = MlpHead;

/// Two-way shift/no-shift classifier over concatenated utterance pairs.
pub type ShiftClassifier = MlpHead;

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<F: Real>(probs: &Tensor<F>) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Pair features `[H_i, H'_j]` for every ordered pair `(i, j)`, or for the
/// given subset.
pub fn pair_features<F: Real>(
    g: &mut Graph<F>,
    h: Var,
    h_prime: Var,
    pairs: Option<Vec<(usize, usize)>>,
) -> Result<Var> {
    let (a, b) = (g.value(h).shape().to_vec(), g.value(h_prime).shape().to_vec());
    if a != b {
        return Err(Error::shape("build_shift_tensor", "fused rows", a[0], b[0]));
    }
    g.tape.pair_concat(h, h_prime, pairs)
}

/// The `|U| x |U| x 2F` tensor whose `(i, j)` fibre is `[H_i, H'_j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftTensor<F> {
    pub tensor: Tensor<F>,
}

impl<F: Real> ShiftTensor<F> {
    pub fn utterances(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn fibre(&self, i: usize, j: usize) -> &[F] {
        let n = self.utterances();
        self.tensor.row(i * n + j)
    }
}

pub fn build_shift_tensor<F: Real>(h: &Tensor<F>, h_prime: &Tensor<F>) -> Result<ShiftTensor<F>> {
    if h.rows() != h_prime.rows() {
        return Err(Error::shape("build_shift_tensor", "fused rows", h.rows(), h_prime.rows()));
    }
    if h.cols() != h_prime.cols() {
        return Err(Error::shape("build_shift_tensor", "fused width", h.cols(), h_prime.cols()));
    }
    let (n, f) = (h.rows(), h.cols());
    let mut data = Vec::with_capacity(n * n * 2 * f);
    for i in 0..n {
        for j in 0..n {
            data.extend_from_slice(h.row(i));
            data.extend_from_slice(h_prime.row(j));
        }
    }
    Ok(ShiftTensor { tensor: Tensor::new(vec![n, n, 2 * f], data)? })
}

/// Emotion distributions and argmax predictions for fused features `h`.
pub fn classify<F: Real>(
    store: &ParamStore<F>,
    head: &EmotionClassifier,
    h: &Tensor<F>,
    dropout: f64,
    pass: &mut Pass,
) -> Result<(Tensor<F>, Vec<usize>)> {
    let mut g = Graph::new(store);
    let x = g.input(h.clone());
    let p = head.forward(&mut g, x, dropout, pass)?;
    let probs = g.value(p).clone();
    let preds = argmax_rows(&probs);
    Ok((probs, preds))
}

/// Shift distributions `|U| x |U| x 2` and the predicted shift matrix.
pub fn shift_classify<F: Real>(
    store: &ParamStore<F>,
    head: &ShiftClassifier,
    t: &ShiftTensor<F>,
    dropout: f64,
    pass: &mut Pass,
) -> Result<(Tensor<F>, Vec<u8>)> {
    let n = t.utterances();
    let mut g = Graph::new(store);
    let x = g.input(t.tensor.clone().as_matrix());
    let z = head.forward(&mut g, x, dropout, pass)?;
    let z = g.value(z).clone();
    let pred = argmax_rows(&z).into_iter().map(|k| k as u8).collect();
    Ok((z.reshape(&[n, n, 2])?, pred))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut r = RngState::new(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn classify_rows_are_distributions() {
        let mut store = ParamStore::<f64>::new();
        let head = MlpHead::new(&mut store, "cls", 6, 4, 3, &mut RngState::new(1)).unwrap();
        let (p, preds) = classify(&store, &head, &rand(5, 6, 2), 0.0, &mut Pass::eval()).unwrap();
        for i in 0..5 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
        assert_eq!(preds, argmax_rows(&p));
    }

    #[test]
    fn logit_shift_invariance() {
        let mut store = ParamStore::<f64>::new();
        let head = MlpHead::new(&mut store, "cls", 6, 4, 3, &mut RngState::new(1)).unwrap();
        let h = rand(4, 6, 3);
        let (p0, c0) = classify(&store, &head, &h, 0.0, &mut Pass::eval()).unwrap();
        let b = store.get(head.out.bias).value.map(|v| v + 7.5);
        store.get_mut(head.out.bias).value = b;
        let (p1, c1) = classify(&store, &head, &h, 0.0, &mut Pass::eval()).unwrap();
        assert!(p0.max_abs_diff(&p1) < 1e-12);
        assert_eq!(c0, c1);
    }

    #[test]
    fn argmax_examples() {
        let t = Tensor::from_rows(&[&[2.0, 1.0, 0.0], &[0.3, 0.3, 0.1], &[0.0, 0.0, 5.0]]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 0, 2]);
    }

    #[test]
    fn shift_tensor_layout() {
        let (h, hp) = (rand(3, 4, 1), rand(3, 4, 2));
        let t = build_shift_tensor(&h, &hp).unwrap();
        assert_eq!(t.tensor.shape(), &[3, 3, 8]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(&t.fibre(i, j)[..4], h.row(i));
                assert_eq!(&t.fibre(i, j)[4..], hp.row(j));
            }
        }
        let same = build_shift_tensor(&h, &h).unwrap();
        assert_eq!(&same.fibre(0, 2)[..4], &same.fibre(2, 0)[4..]);
        assert_eq!(&same.fibre(0, 2)[4..], &same.fibre(2, 0)[..4]);
        let one = build_shift_tensor(&rand(1, 4, 3), &rand(1, 4, 4)).unwrap();
        assert_eq!(one.tensor.shape(), &[1, 1, 8]);
        assert!(build_shift_tensor(&h, &rand(2, 4, 5)).is_err());
    }

    #[test]
    fn zero_shift_head_is_uniform() {
        let mut store = ParamStore::<f64>::new();
        let head = MlpHead::new(&mut store, "shift", 8, 4, 2, &mut RngState::new(1)).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let t = build_shift_tensor(&rand(3, 4, 1), &rand(3, 4, 2)).unwrap();
        let (z, _) = shift_classify(&store, &head, &t, 0.0, &mut Pass::eval()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.5));
    }

    /// Shift head evaluated with scalar loops: hidden = ReLU(W t + b),
    /// z = softmax(W' hidden + b').
    #[test]
    fn shift_head_matches_manual_composition() {
        let mut store = ParamStore::<f64>::new();
        let head = MlpHead::new(&mut store, "shift", 4, 3, 2, &mut RngState::new(9)).unwrap();
        store.get_mut(head.hidden.bias).value = Tensor::vector(&[0.1, -0.2, 0.3]);
        store.get_mut(head.out.bias).value = Tensor::vector(&[0.05, -0.05]);
        let t = build_shift_tensor(&rand(2, 2, 1), &rand(2, 2, 2)).unwrap();
        let (z, pred) = shift_classify(&store, &head, &t, 0.0, &mut Pass::eval()).unwrap();
        let (w1, b1) = (&store.get(head.hidden.weight).value, &store.get(head.hidden.bias).value);
        let (w2, b2) = (&store.get(head.out.weight).value, &store.get(head.out.bias).value);
        for i in 0..2 {
            for j in 0..2 {
                let x = t.fibre(i, j);
                let hid: Vec<f64> =
                    (0..3).map(|k| (b1.data()[k] + (0..4).map(|c| w1.at(k, c) * x[c]).sum::<f64>()).max(0.0)).collect();
                let l: Vec<f64> =
                    (0..2).map(|o| b2.data()[o] + (0..3).map(|k| w2.at(o, k) * hid[k]).sum::<f64>()).collect();
                let e = [l[0].exp(), l[1].exp()];
                let p0 = e[0] / (e[0] + e[1]);
                let r = (i * 2 + j) * 2;
                assert!((z.data()[r] - p0).abs() < 1e-12);
                assert!((z.data()[r] + z.data()[r + 1] - 1.0).abs() < 1e-12);
                assert_eq!(pred[i * 2 + j], u8::from(p0 < 0.5));
            }
        }
    }
}
