//! Finite-difference verification of tape gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Conversation, FeatureDims};
use crate::error::{Error, Result};
use crate::model::{EncoderKind, FusionModel, ModelConfig, Passes, Precision};
use crate::nn::Graph;
use crate::objective::{LambdaMode, ObjectiveConfig};
use crate::params::ParamStore;
use crate::synth::{synth_corpus, SynthSpec};
use crate::tape::Var;
use crate::train::batch_objective;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Largest accepted relative error per tensor.
    pub tolerance: f64,
    /// Magnitude below which errors are measured in absolute terms.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, tolerance: 1e-4, abs_floor: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(move |t| !(t.max_rel_error < self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

/// Compares tape gradients of `loss_fn` with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of every tensor in `store`.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, abs_floor)`;
/// each tensor reports its worst entry. `loss_fn` must be deterministic and
/// return a `1 x 1` node.
pub fn grad_check<L>(store: &mut ParamStore<f64>, cfg: GradCheckConfig, mut loss_fn: L) -> Result<GradCheckReport>
where
    L: FnMut(&mut Graph<f64>) -> Result<Var>,
{
    store.zero_grad();
    let base = {
        let mut g = Graph::new(store);
        let l = loss_fn(&mut g)?;
        let v = g.tape.scalar(l);
        if !v.is_finite() {
            return Err(Error::NonFinite(String::from("loss at the unperturbed point")));
        }
        g.accumulate_into(l, store)?;
        v
    };

    let mut eval = |store: &ParamStore<f64>, what: &str| -> Result<f64> {
        let mut g = Graph::new(store);
        let l = loss_fn(&mut g)?;
        let v = g.tape.scalar(l);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss while perturbing {what}")));
        }
        Ok(v)
    };

    let mut tensors = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let analytic = store.get(id).grad.data().to_vec();
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + cfg.eps;
            let up = eval(store, &name)?;
            store.get_mut(id).value.data_mut()[i] = orig - cfg.eps;
            let down = eval(store, &name)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        tensors.push(TensorCheck {
            name,
            numel: analytic.len(),
            max_rel_error: worst,
            max_abs_grad: analytic.iter().fold(0.0, |m, g| m.max(g.abs())),
        });
    }
    store.zero_grad();
    Ok(GradCheckReport { loss: base, tolerance: cfg.tolerance, tensors })
}

/// A tiny full model checked end to end on the combined objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckSpec {
    pub encoder: EncoderKind,
    pub lambda: LambdaMode,
    pub model_dim: usize,
    pub heads: usize,
    pub utterances: usize,
    pub classes: usize,
    pub dialogues: usize,
    pub seed: u64,
    /// Multiplies the objective by zero; every gradient must vanish.
    pub constant_loss: bool,
}

impl Default for ModelCheckSpec {
    fn default() -> Self {
        ModelCheckSpec {
            encoder: EncoderKind::Acme,
            lambda: LambdaMode::Manual { lambda: 0.9 },
            model_dim: 8,
            heads: 2,
            utterances: 4,
            classes: 3,
            dialogues: 2,
            seed: 11,
            constant_loss: false,
        }
    }
}

impl ModelCheckSpec {
    pub const MAX_DIM: usize = 8;
    pub const MAX_UTTERANCES: usize = 4;
    pub const MAX_CLASSES: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if self.model_dim > Self::MAX_DIM || self.utterances > Self::MAX_UTTERANCES || self.classes > Self::MAX_CLASSES
        {
            return Err(Error::Config(format!(
                "gradient checks need model_dim <= {}, utterances <= {}, classes <= {}",
                Self::MAX_DIM,
                Self::MAX_UTTERANCES,
                Self::MAX_CLASSES
            )));
        }
        if self.dialogues == 0 || self.utterances == 0 {
            return Err(Error::Config("gradient checks need at least one utterance".into()));
        }
        Ok(())
    }

    /// Dropout-free depth-1 configuration in 64-bit precision.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(Self::dims(), self.classes).without_dropout();
        m.model_dim = self.model_dim;
        m.heads = self.heads;
        m.rume_depth = 1;
        m.acme_depth = 1;
        m.encoder = self.encoder;
        m.precision = Precision::F64;
        m
    }

    fn dims() -> FeatureDims {
        FeatureDims { text: 5, visual: 4, audio: 3 }
    }

    pub fn dialogues(&self) -> Result<Vec<Conversation>> {
        let spec = SynthSpec {
            classes: self.classes,
            train_dialogues: self.dialogues,
            val_dialogues: 1,
            test_dialogues: 1,
            utterances: self.utterances,
            dims: Self::dims(),
            shift_rate: 0.5,
            seed: self.seed,
            ..SynthSpec::default()
        };
        Ok(synth_corpus(&spec)?.train)
    }
}

/// Runs [`grad_check`] over every parameter of the model described by
/// `spec`, including the task log-variances.
pub fn check_model(spec: &ModelCheckSpec, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    spec.validate()?;
    let model_cfg = spec.model_config();
    let objective = ObjectiveConfig { lambda: spec.lambda, weight_decay: 0.0 };
    objective.validate()?;
    let dialogues = spec.dialogues()?;
    let batch: Vec<&Conversation> = dialogues.iter().collect();
    let mut store = ParamStore::<f64>::new();
    let model = FusionModel::new(&model_cfg, &mut store, spec.seed)?;
    grad_check(&mut store, cfg, |g| {
        let loss = batch_objective(&model, g, &batch, &mut Passes::train(spec.seed), &objective)?;
        Ok(if spec.constant_loss { g.tape.scale(loss.total, 0.0) } else { loss.total })
    })
}
