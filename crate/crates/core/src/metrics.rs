//! Classification metrics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::ShiftLabelMatrix;
use crate::error::{Error, Result};

/// Counts indexed `[gold][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(gold: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::shape("confusion_matrix", "predictions", gold.len(), pred.len()));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&g, &p) in gold.iter().zip(pred) {
            if g >= classes || p >= classes {
                return Err(Error::shape("confusion_matrix", "class index bound", classes, g.max(p) + 1));
            }
            counts[g][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Gold count per class.
    pub fn support(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn predicted(&self) -> Vec<u64> {
        (0..self.classes()).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    pub fn per_class_f1(&self) -> Vec<f64> {
        let (sup, pred) = (self.support(), self.predicted());
        (0..self.classes())
            .map(|c| {
                let tp = self.counts[c][c];
                f1_from_counts(tp, pred[c] - tp, sup[c] - tp)
            })
            .collect()
    }
}

/// `2·tp / (2·tp + fp + fn)`, zero when there are no true positives.
pub fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub support: Vec<u64>,
    pub confusion: ConfusionMatrix,
    /// Binary F1 of pairwise shift predictions, when a shift head ran.
    pub shift_f1: Option<f64>,
}

pub fn classification_report(gold: &[usize], pred: &[usize], classes: usize) -> Result<MetricsReport> {
    let confusion = ConfusionMatrix::new(gold, pred, classes)?;
    let total = confusion.total();
    if total == 0 {
        return Err(Error::Config("metrics over zero utterances".into()));
    }
    let support = confusion.support();
    let per_class_f1 = confusion.per_class_f1();
    let weighted_f1 = per_class_f1.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / total as f64;
    Ok(MetricsReport {
        accuracy: confusion.trace() as f64 / total as f64,
        weighted_f1,
        per_class_f1,
        support,
        confusion,
        shift_f1: None,
    })
}

/// Binary F1 over all ordered pairs pooled across dialogues; the positive
/// class is "shift".
pub fn shift_f1(pred: &[Vec<u8>], gold: &[ShiftLabelMatrix]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::shape("shift_f1", "dialogues", gold.len(), pred.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.as_slice().len() {
            return Err(Error::shape("shift_f1", "pairs", g.as_slice().len(), p.len()));
        }
        for (&a, &b) in p.iter().zip(g.as_slice()) {
            match (a, b) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when the
/// series differ in length, have fewer than two points, or either is
/// constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / libm::sqrt(va * vb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::shift_labels;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 1, 0];
        let r = classification_report(&y, &y, 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.weighted_f1, 1.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(r.confusion.counts[i][j] == 0, i != j || r.support[i] == 0);
            }
        }
    }

    #[test]
    fn two_class_hand_example() {
        // confusion [[2,1],[0,3]]
        let gold = [0, 0, 0, 1, 1, 1];
        let pred = [0, 0, 1, 1, 1, 1];
        let r = classification_report(&gold, &pred, 2).unwrap();
        assert_eq!(r.confusion.counts, vec![vec![2, 1], vec![0, 3]]);
        assert!((r.accuracy - 5.0 / 6.0).abs() < 1e-15);
        assert!((r.per_class_f1[0] - 0.8).abs() < 1e-15);
        assert!((r.per_class_f1[1] - 6.0 / 7.0).abs() < 1e-15);
        let w = (3.0 * 0.8 + 3.0 * 6.0 / 7.0) / 6.0;
        assert!((r.weighted_f1 - w).abs() < 1e-15);
    }

    #[test]
    fn single_class_corpus() {
        let r = classification_report(&[1, 1, 1], &[1, 1, 1], 3).unwrap();
        assert_eq!(r.weighted_f1, 1.0);
    }

    #[test]
    fn shift_f1_examples() {
        let gold = vec![shift_labels(&[0, 0, 1])];
        let perfect = vec![gold[0].as_slice().to_vec()];
        assert_eq!(shift_f1(&perfect, &gold).unwrap(), 1.0);
        assert_eq!(shift_f1(&[vec![0; 9]], &gold).unwrap(), 0.0);
        // gold positives at 2, 5, 6, 7; predict 2, 5 (tp) and 0 (fp), miss 6, 7 -> but
        // keep exactly one miss by predicting 7 too
        let pred = vec![vec![1, 0, 1, 0, 0, 1, 0, 1, 0]];
        // tp: 2,5,7 = 3; fp: 0 = 1; fn: 6 = 1
        assert!((shift_f1(&pred, &gold).unwrap() - 6.0 / 8.0).abs() < 1e-15);
        let gold2 = vec![ShiftLabelMatrix::from_raw(2, vec![1, 1, 0, 1]).unwrap()];
        let pred2 = vec![vec![1, 1, 1, 0]];
        // tp 2, fp 1, fn 1
        assert!((shift_f1(&pred2, &gold2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        // ties: ranks (1.5, 1.5, 3) vs (1, 2, 3)
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.8660254037844387).abs() < 1e-12);
    }
}
