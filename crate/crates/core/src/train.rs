//! Training loop, evaluation and configuration presets.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Conversation, Corpus, FeatureDims};
use crate::error::{Error, Result};
use crate::heads::argmax_rows;
use crate::loss::{classification_loss, shift_loss};
use crate::metrics::{classification_report, f1_from_counts, MetricsReport};
use crate::model::{FusionModel, ModelConfig, Passes};
use crate::nn::Graph;
use crate::objective::{total_objective, LambdaMode, ObjectiveConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::rng::{streams, RngState};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Dialogues per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Whether validation also scores the shift head (diagnostic only).
    pub eval_shift: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-5, batch_size: 64, epochs: 80, seed: 0, eval_shift: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Named hyperparameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Meld,
    Iemocap,
    /// Desk-scale settings for synthetic corpora.
    Synthetic,
}

impl core::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "meld" => Ok(Preset::Meld),
            "iemocap" => Ok(Preset::Iemocap),
            "synthetic" => Ok(Preset::Synthetic),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

impl Preset {
    pub fn configs(self, dims: FeatureDims, classes: usize) -> (ModelConfig, TrainConfig, ObjectiveConfig) {
        let mut m = ModelConfig::new(dims, classes);
        let mut t = TrainConfig::default();
        let mut o = ObjectiveConfig::default();
        match self {
            Preset::Meld => {
                (m.rume_depth, m.acme_depth) = (2, 3);
                (m.rume_dropout, m.acme_dropout, m.head_dropout) = (0.1, 0.3, 0.3);
                (t.lr, t.batch_size) = (1e-5, 64);
                o.lambda = LambdaMode::Manual { lambda: 0.9 };
            }
            Preset::Iemocap => {
                (m.rume_depth, m.acme_depth) = (2, 5);
                (m.rume_dropout, m.acme_dropout, m.head_dropout) = (0.2, 0.4, 0.4);
                (t.lr, t.batch_size) = (2e-5, 32);
                o.lambda = LambdaMode::Manual { lambda: 1.0 };
            }
            Preset::Synthetic => {
                m.model_dim = 32;
                m.heads = 4;
                (m.rume_depth, m.acme_depth) = (2, 2);
                // 600 training utterances overfit quickly; heavier
                // regularisation than the large-corpus presets
                (m.rume_dropout, m.acme_dropout, m.head_dropout) = (0.3, 0.3, 0.3);
                (t.lr, t.batch_size, t.epochs) = (3e-4, 4, 50);
                o.lambda = LambdaMode::Manual { lambda: 0.9 };
                o.weight_decay = 0.01;
            }
        }
        (m, t, o)
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Utterance-weighted mean of the per-batch classification loss.
    pub loss_cls: f64,
    /// Pair-weighted mean of the per-batch shift loss.
    pub loss_shift: Option<f64>,
    /// Mean per-batch objective.
    pub objective: f64,
    pub val_accuracy: f64,
    pub val_weighted_f1: f64,
    pub val_shift_f1: Option<f64>,
    pub log_var_cls: Option<f64>,
    pub log_var_shift: Option<f64>,
    pub best: bool,
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub cls: Var,
    pub shift: Option<Var>,
    pub utterances: usize,
    pub pairs: usize,
}

/// Records the forward of every dialogue in `batch` and the combined
/// objective on `g`.
pub fn batch_objective<F: Real>(
    model: &FusionModel,
    g: &mut Graph<F>,
    batch: &[&Conversation],
    passes: &mut Passes,
    objective: &ObjectiveConfig,
) -> Result<BatchLoss> {
    let lesm = model.cfg.use_lesm;
    let mut cls_items = Vec::with_capacity(batch.len());
    let mut shift_items = Vec::with_capacity(batch.len());
    let labels: Vec<Vec<usize>> = batch.iter().map(|c| c.labels()).collect();
    for conv in batch {
        let out = model.forward(g, conv, passes, lesm)?;
        cls_items.push(out.probs);
        if let Some(s) = out.shift {
            shift_items.push((s.probs, s.targets));
        }
    }
    let cls_refs: Vec<(Var, &[usize])> = cls_items.iter().zip(&labels).map(|(&p, l)| (p, l.as_slice())).collect();
    let cls = classification_loss(g, &cls_refs)?;
    let (shift, pairs) = if lesm {
        let refs: Vec<(Var, &[usize])> = shift_items.iter().map(|(p, t)| (*p, t.as_slice())).collect();
        (Some(shift_loss(g, &refs)?), shift_items.iter().map(|(_, t)| t.len()).sum())
    } else {
        (None, 0)
    };
    let total = total_objective(g, cls, shift, objective, Some(&model.log_vars))?;
    Ok(BatchLoss { total, cls, shift, utterances: labels.iter().map(Vec::len).sum(), pairs })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Also score the shift head on pairs built from a single eval pass.
    pub with_shift: bool,
    /// Keep fused features and class distributions per dialogue.
    pub keep_outputs: bool,
}

#[derive(Clone, Debug)]
pub struct Evaluation<F> {
    pub report: MetricsReport,
    pub predictions: Vec<Vec<usize>>,
    /// Per-dialogue fused features when requested.
    pub fused: Vec<Tensor<F>>,
    pub probs: Vec<Tensor<F>>,
}

/// Eval-mode forward of every dialogue, one at a time.
pub fn evaluate<F: Real>(
    model: &FusionModel,
    store: &ParamStore<F>,
    dialogues: &[Conversation],
    opts: EvalOptions,
) -> Result<Evaluation<F>> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let mut predictions = Vec::with_capacity(dialogues.len());
    let (mut fused, mut probs) = (Vec::new(), Vec::new());
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    let mut passes = Passes::eval();
    for conv in dialogues {
        let mut g = Graph::new(store);
        let out = model.forward(&mut g, conv, &mut passes, opts.with_shift)?;
        let p = argmax_rows(g.value(out.probs));
        gold.extend(conv.labels());
        pred.extend_from_slice(&p);
        predictions.push(p);
        if let Some(s) = &out.shift {
            for (k, &t) in argmax_rows(g.value(s.probs)).iter().zip(&s.targets) {
                match (*k, t) {
                    (1, 1) => tp += 1,
                    (1, 0) => fp += 1,
                    (0, 1) => fneg += 1,
                    _ => {}
                }
            }
        }
        if opts.keep_outputs {
            fused.push(g.value(out.fused).clone());
            probs.push(g.value(out.probs).clone());
        }
    }
    let mut report = classification_report(&gold, &pred, model.cfg.classes)?;
    if opts.with_shift {
        report.shift_f1 = Some(f1_from_counts(tp, fp, fneg));
    }
    Ok(Evaluation { report, predictions, fused, probs })
}

pub struct TrainOutcome<F> {
    pub model: FusionModel,
    /// Parameters of the selected epoch.
    pub store: ParamStore<F>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: MetricsReport,
}

fn check_corpus(corpus: &Corpus, cfg: &ModelConfig) -> Result<()> {
    if corpus.dims != cfg.dims {
        let (e, a) = (cfg.dims, corpus.dims);
        for (axis, x, y) in
            [("text dim", e.text, a.text), ("visual dim", e.visual, a.visual), ("audio dim", e.audio, a.audio)]
        {
            if x != y {
                return Err(Error::shape("train", axis, x, y));
            }
        }
    }
    if corpus.num_classes() != cfg.classes {
        return Err(Error::shape("train", "emotion classes", cfg.classes, corpus.num_classes()));
    }
    if corpus.train.is_empty() || corpus.val.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    Ok(())
}

fn divergence(epoch: usize, batch: usize, detail: impl ToString) -> Error {
    Error::Divergence { epoch, batch, detail: detail.to_string() }
}

/// Trains from scratch and returns the parameters of the epoch with the
/// highest validation weighted F1 (earliest on ties). `observer` sees each
/// epoch record as soon as it is complete.
pub fn train<F: Real>(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    objective: &ObjectiveConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<F>> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    objective.validate()?;
    check_corpus(corpus, model_cfg)?;

    let mut store = ParamStore::<F>::new();
    let model = FusionModel::new(model_cfg, &mut store, train_cfg.seed)?;
    let mut opt = AdamW::new(
        AdamWConfig { lr: train_cfg.lr, weight_decay: objective.weight_decay, ..AdamWConfig::default() },
        &store,
    );
    let mut shuffle = RngState::with_stream(train_cfg.seed, streams::SHUFFLE);
    let mut passes = Passes::train(train_cfg.seed);
    let automatic = matches!(objective.lambda, LambdaMode::Automatic);
    let eval_opts = EvalOptions { with_shift: train_cfg.eval_shift && model_cfg.use_lesm, keep_outputs: false };

    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<F>, MetricsReport)> = None;
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    for epoch in 1..=train_cfg.epochs {
        shuffle.shuffle(&mut order);
        let (mut cls_sum, mut shift_sum, mut obj_sum) = (0.0, 0.0, 0.0);
        let (mut utts, mut pairs, mut batches) = (0usize, 0usize, 0usize);
        for (b, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let batch: Vec<&Conversation> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            store.zero_grad();
            let mut g = Graph::new(&store);
            let loss = batch_objective(&model, &mut g, &batch, &mut passes, objective)?;
            let total = g.tape.scalar(loss.total).as_f64();
            if !total.is_finite() {
                return Err(divergence(epoch, b + 1, format!("objective is {total}")));
            }
            g.accumulate_into(loss.total, &mut store)?;
            opt.step(&mut store).map_err(|e| divergence(epoch, b + 1, e))?;
            cls_sum += g.tape.scalar(loss.cls).as_f64() * loss.utterances as f64;
            if let Some(s) = loss.shift {
                shift_sum += g.tape.scalar(s).as_f64() * loss.pairs as f64;
            }
            obj_sum += total;
            utts += loss.utterances;
            pairs += loss.pairs;
            batches += 1;
        }
        let val = evaluate(&model, &store, &corpus.val, eval_opts)?.report;
        let improved = best.as_ref().is_none_or(|(_, f1, _, _)| val.weighted_f1 > *f1);
        let scalar = |id| store.get(id).value.data()[0].as_f64();
        let record = EpochRecord {
            epoch,
            loss_cls: cls_sum / utts as f64,
            loss_shift: model_cfg.use_lesm.then(|| shift_sum / pairs as f64),
            objective: obj_sum / batches as f64,
            val_accuracy: val.accuracy,
            val_weighted_f1: val.weighted_f1,
            val_shift_f1: val.shift_f1,
            log_var_cls: automatic.then(|| scalar(model.log_vars.log_var_cls)),
            log_var_shift: (automatic && model_cfg.use_lesm).then(|| scalar(model.log_vars.log_var_shift)),
            best: improved,
        };
        observer(&record);
        history.push(record);
        if improved {
            best = Some((epoch, val.weighted_f1, store.clone(), val));
        }
    }
    let (best_epoch, _, store, best_val) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, store, history, best_epoch, best_val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_corpus, SynthSpec};

    fn setup() -> (Corpus, ModelConfig, TrainConfig, ObjectiveConfig) {
        let spec = SynthSpec {
            dims: FeatureDims { text: 6, visual: 5, audio: 4 },
            train_dialogues: 6,
            val_dialogues: 2,
            test_dialogues: 2,
            utterances: 5,
            classes: 3,
            ..Default::default()
        };
        let corpus = synth_corpus(&spec).unwrap();
        let (mut m, mut t, o) = Preset::Synthetic.configs(spec.dims, 3);
        m.model_dim = 8;
        m.heads = 2;
        (m.rume_depth, m.acme_depth) = (1, 1);
        t.epochs = 3;
        t.batch_size = 3;
        (corpus, m, t, o)
    }

    #[test]
    fn deterministic_history() {
        let (c, m, t, o) = setup();
        let a = train::<f64>(&c, &m, &t, &o, &mut |_| {}).unwrap();
        let b = train::<f64>(&c, &m, &t, &o, &mut |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3);
        assert!(a.history.iter().all(|r| r.loss_shift.is_some() && r.val_shift_f1.is_some()));
    }

    #[test]
    fn selected_checkpoint_reproduces_best_val_metrics() {
        let (c, m, t, o) = setup();
        let out = train::<f64>(&c, &m, &t, &o, &mut |_| {}).unwrap();
        let ev =
            evaluate(&out.model, &out.store, &c.val, EvalOptions { with_shift: true, ..Default::default() }).unwrap();
        assert_eq!(ev.report, out.best_val);
        let best = &out.history[out.best_epoch - 1];
        assert!(out.history.iter().all(|r| r.val_weighted_f1 <= best.val_weighted_f1));
        assert!(out.history[..out.best_epoch - 1].iter().all(|r| r.val_weighted_f1 < best.val_weighted_f1));
    }

    #[test]
    fn automatic_mode_records_log_variances() {
        let (c, m, t, _) = setup();
        let out = train::<f64>(&c, &m, &t, &ObjectiveConfig::automatic(), &mut |_| {}).unwrap();
        assert!(out.history.iter().all(|r| r.log_var_cls.is_some() && r.log_var_shift.is_some()));
        assert_ne!(out.history[2].log_var_cls, Some(0.0));
    }

    #[test]
    fn without_lesm_has_no_shift_series() {
        let (c, mut m, t, o) = setup();
        m.use_lesm = false;
        let out = train::<f32>(&c, &m, &t, &o, &mut |_| {}).unwrap();
        assert!(out.history.iter().all(|r| r.loss_shift.is_none() && r.val_shift_f1.is_none()));
    }

    #[test]
    fn divergence_is_reported() {
        let (c, m, mut t, o) = setup();
        t.lr = 1e300;
        let err = train::<f64>(&c, &m, &t, &o, &mut |_| {}).err().unwrap();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let (c, mut m, t, o) = setup();
        m.classes = 4;
        let err = train::<f64>(&c, &m, &t, &o, &mut |_| {}).err().unwrap();
        assert_eq!(err, Error::shape("train", "emotion classes", 4, 3));
    }
}
