//! The full fusion network: input projections, recurrent unimodal encoding,
//! cross-modal fusion, the emotion classifier and the shift head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::acme::{CrossModalEncoder, TfeScheme, TransformerFusion};
use crate::data::{shift_labels, Conversation, FeatureDims, ModalSetting, DEFAULT_MAX_UTTERANCES};
use crate::error::{Error, Result};
use crate::heads::{pair_features, EmotionClassifier, MlpHead, ShiftClassifier};
use crate::nn::{Graph, Pass};
use crate::objective::UncertaintyWeights;
use crate::params::ParamStore;
use crate::rng::{streams, RngState};
use crate::rume::{InputProjections, RecurrentEncoder};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Fusion encoder placed after the unimodal encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "ACME")]
    Acme,
    #[serde(rename = "TFE1")]
    Tfe1,
    #[serde(rename = "TFE2")]
    Tfe2,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [EncoderKind::Acme, EncoderKind::Tfe1, EncoderKind::Tfe2];

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Acme => "ACME",
            EncoderKind::Tfe1 => "TFE1",
            EncoderKind::Tfe2 => "TFE2",
        }
    }
}

impl core::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderKind::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown encoder {s:?}, expected ACME, TFE1 or TFE2")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: FeatureDims,
    pub classes: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Feedforward expansion, hidden width `ff_mult * width`.
    pub ff_mult: usize,
    pub rume_depth: usize,
    pub acme_depth: usize,
    pub rume_dropout: f64,
    pub acme_dropout: f64,
    pub head_dropout: f64,
    /// Hidden width of both heads; `None` means `model_dim`.
    pub head_hidden: Option<usize>,
    pub encoder: EncoderKind,
    pub modal_setting: ModalSetting,
    pub use_rume: bool,
    /// When off, the unimodal outputs are concatenated directly and the
    /// shift head sees two unimodal passes.
    pub use_acme: bool,
    pub use_lesm: bool,
    /// Dialogues longer than this train the shift head on `cap²` sampled
    /// pairs instead of all `|U|²`.
    pub shift_pair_cap: usize,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn new(dims: FeatureDims, classes: usize) -> Self {
        ModelConfig {
            dims,
            classes,
            model_dim: 256,
            heads: 8,
            ff_mult: 4,
            rume_depth: 2,
            acme_depth: 3,
            rume_dropout: 0.1,
            acme_dropout: 0.3,
            head_dropout: 0.3,
            head_hidden: None,
            encoder: EncoderKind::Acme,
            modal_setting: ModalSetting::Tva,
            use_rume: true,
            use_acme: true,
            use_lesm: true,
            shift_pair_cap: DEFAULT_MAX_UTTERANCES,
            precision: Precision::F32,
        }
    }

    /// Width of the fused features fed to both heads.
    pub fn fused_dim(&self) -> usize {
        3 * self.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        for (field, v) in [
            ("model.dims.text", self.dims.text),
            ("model.dims.visual", self.dims.visual),
            ("model.dims.audio", self.dims.audio),
            ("model.model_dim", self.model_dim),
            ("model.heads", self.heads),
            ("model.ff_mult", self.ff_mult),
            ("model.shift_pair_cap", self.shift_pair_cap),
        ] {
            if v == 0 {
                return cfg(format!("{field} must be positive"));
            }
        }
        if self.classes < 2 {
            return cfg(format!("model.classes must be at least 2, got {}", self.classes));
        }
        if !self.model_dim.is_multiple_of(2) {
            return cfg(format!("model.model_dim must be even for the bidirectional GRU, got {}", self.model_dim));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return cfg(format!("model.model_dim {} is not divisible by model.heads {}", self.model_dim, self.heads));
        }
        if self.use_rume && self.rume_depth == 0 {
            return cfg("model.rume_depth must be positive when RUME is enabled".into());
        }
        if self.use_acme && self.acme_depth == 0 {
            return cfg("model.acme_depth must be positive when the fusion encoder is enabled".into());
        }
        if self.head_hidden == Some(0) {
            return cfg("model.head_hidden must be positive".into());
        }
        for (field, r) in [
            ("model.rume_dropout", self.rume_dropout),
            ("model.acme_dropout", self.acme_dropout),
            ("model.head_dropout", self.head_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return cfg(format!("{field} must lie in [0, 1), got {r}"));
            }
        }
        Ok(())
    }

    /// Sets every dropout rate to zero.
    pub fn without_dropout(mut self) -> Self {
        self.rume_dropout = 0.0;
        self.acme_dropout = 0.0;
        self.head_dropout = 0.0;
        self
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Acme(CrossModalEncoder),
    Transformer(TransformerFusion),
    /// Unimodal outputs concatenated as they are.
    Concat,
}

/// Random sources for one forward: the main pass, the second fused pass
/// feeding the shift head, and pair sampling for long dialogues.
#[derive(Clone, Debug)]
pub struct Passes {
    pub main: Pass,
    pub second: Pass,
    pub pairs: RngState,
}

impl Passes {
    pub fn train(seed: u64) -> Self {
        Passes {
            main: Pass::train(RngState::with_stream(seed, streams::DROPOUT)),
            second: Pass::train(RngState::with_stream(seed, streams::SHIFT_PASS)),
            pairs: RngState::with_stream(seed, streams::PAIR_SAMPLING),
        }
    }

    pub fn eval() -> Self {
        Passes { main: Pass::eval(), second: Pass::eval(), pairs: RngState::with_stream(0, streams::PAIR_SAMPLING) }
    }

    pub fn is_train(&self) -> bool {
        self.main.is_train()
    }
}

/// Shift-head branch of one dialogue.
#[derive(Clone, Debug)]
pub struct ShiftBranch {
    /// `H'`; equal to `H` when no second pass ran.
    pub fused_prime: Var,
    /// `P x 2` distributions for the evaluated pairs in row-major order.
    pub probs: Var,
    pub targets: Vec<usize>,
    /// `None` when all `|U|²` pairs were evaluated.
    pub pairs: Option<Vec<(usize, usize)>>,
}

#[derive(Clone, Debug)]
pub struct DialogueOutput {
    pub fused: Var,
    pub probs: Var,
    pub shift: Option<ShiftBranch>,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub cfg: ModelConfig,
    pub inputs: InputProjections,
    pub rume: Option<RecurrentEncoder>,
    pub fusion: Fusion,
    pub classifier: EmotionClassifier,
    /// Always allocated so initial weights do not depend on the switch.
    pub shift_head: ShiftClassifier,
    pub log_vars: UncertaintyWeights,
}

impl FusionModel {
    /// Registers all parameters in `store`, initialised from `seed`.
    pub fn new<F: Real>(cfg: &ModelConfig, store: &mut ParamStore<F>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngState::with_stream(seed, streams::INIT);
        let d = cfg.model_dim;
        let dims = [cfg.dims.text, cfg.dims.visual, cfg.dims.audio];
        let inputs = InputProjections::new(store, dims, d, &mut rng)?;
        let rume = if cfg.use_rume {
            Some(RecurrentEncoder::new(store, cfg.rume_depth, d, cfg.ff_mult * d, cfg.rume_dropout, &mut rng)?)
        } else {
            None
        };
        let fusion = if !cfg.use_acme {
            Fusion::Concat
        } else {
            match cfg.encoder {
                EncoderKind::Acme => Fusion::Acme(CrossModalEncoder::new(
                    store,
                    cfg.acme_depth,
                    d,
                    cfg.heads,
                    cfg.ff_mult * d,
                    cfg.acme_dropout,
                    &mut rng,
                )?),
                EncoderKind::Tfe1 | EncoderKind::Tfe2 => {
                    let scheme =
                        if cfg.encoder == EncoderKind::Tfe1 { TfeScheme::Sequence } else { TfeScheme::Feature };
                    Fusion::Transformer(TransformerFusion::new(
                        store,
                        scheme,
                        cfg.acme_depth,
                        d,
                        cfg.heads,
                        cfg.ff_mult,
                        cfg.acme_dropout,
                        &mut rng,
                    )?)
                }
            }
        };
        let fused = cfg.fused_dim();
        let hidden = cfg.head_hidden.unwrap_or(d);
        let classifier = MlpHead::new(store, "classifier", fused, hidden, cfg.classes, &mut rng)?;
        let shift_head = MlpHead::new(store, "shift", 2 * fused, hidden, 2, &mut rng)?;
        let log_vars = UncertaintyWeights::new(store)?;
        Ok(FusionModel { cfg: cfg.clone(), inputs, rume, fusion, classifier, shift_head, log_vars })
    }

    /// Checks that a dialogue matches the configured feature widths.
    pub fn check_dialogue(&self, conv: &Conversation) -> Result<()> {
        if conv.is_empty() {
            return Err(Error::Validation(format!("dialogue {:?} has no utterances", conv.id)));
        }
        let u = &conv.utterances[0];
        for (axis, expected, actual) in [
            ("text feature width", self.cfg.dims.text, u.text.len()),
            ("visual feature width", self.cfg.dims.visual, u.visual.len()),
            ("audio feature width", self.cfg.dims.audio, u.audio.len()),
        ] {
            if expected != actual {
                return Err(Error::shape("model input", axis, expected, actual));
            }
        }
        if let Some(u) = conv.utterances.iter().find(|u| u.label >= self.cfg.classes) {
            return Err(Error::Validation(format!(
                "dialogue {:?}: label {} outside the {} model classes",
                conv.id, u.label, self.cfg.classes
            )));
        }
        Ok(())
    }

    /// Projected `|U| x D` streams arranged by the modal setting.
    pub fn project<F: Real>(&self, g: &mut Graph<F>, conv: &Conversation) -> Result<[Var; 3]> {
        self.check_dialogue(conv)?;
        let raw = crate::data::modal_inputs::<F>(conv, self.cfg.modal_setting);
        let mut out = Vec::with_capacity(3);
        for m in raw {
            let x = g.input(m.features);
            out.push(self.inputs.get(m.modality).forward(g, x)?);
        }
        Ok([out[0], out[1], out[2]])
    }

    pub fn unimodal<F: Real>(&self, g: &mut Graph<F>, x: [Var; 3], pass: &mut Pass) -> Result<[Var; 3]> {
        match &self.rume {
            Some(r) => r.encode(g, x, pass),
            None => Ok(x),
        }
    }

    /// Fused `|U| x 3D` features from unimodal streams.
    pub fn fuse<F: Real>(&self, g: &mut Graph<F>, x: [Var; 3], pass: &mut Pass) -> Result<Var> {
        match &self.fusion {
            Fusion::Acme(enc) => {
                let h = enc.encode(g, x, None, pass)?;
                g.tape.concat_cols(&h)
            }
            Fusion::Transformer(t) => t.encode(g, x, None, pass),
            Fusion::Concat => g.tape.concat_cols(&x),
        }
    }

    /// Runs one dialogue. The shift branch is built when `with_shift` is set;
    /// in training mode it uses a second, independently masked fused pass,
    /// otherwise it reuses `H`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        conv: &Conversation,
        passes: &mut Passes,
        with_shift: bool,
    ) -> Result<DialogueOutput> {
        let projected = self.project(g, conv)?;
        let uni = self.unimodal(g, projected, &mut passes.main)?;
        let fused = self.fuse(g, uni, &mut passes.main)?;
        let probs = self.classifier.forward(g, fused, self.cfg.head_dropout, &mut passes.main)?;
        let shift = if with_shift {
            let fused_prime = if passes.is_train() {
                match self.fusion {
                    Fusion::Concat => {
                        let uni2 = self.unimodal(g, projected, &mut passes.second)?;
                        self.fuse(g, uni2, &mut passes.second)?
                    }
                    _ => self.fuse(g, uni, &mut passes.second)?,
                }
            } else {
                fused
            };
            let labels = conv.labels();
            let n = labels.len();
            let full = shift_labels(&labels);
            let pairs = sample_pairs(n, self.cfg.shift_pair_cap, &mut passes.pairs);
            let targets = match &pairs {
                None => full.targets(),
                Some(p) => p.iter().map(|&(i, j)| full.get(i, j) as usize).collect(),
            };
            let t = pair_features(g, fused, fused_prime, pairs.clone())?;
            let probs = self.shift_head.forward(g, t, self.cfg.head_dropout, &mut passes.second)?;
            Some(ShiftBranch { fused_prime, probs, targets, pairs })
        } else {
            None
        };
        Ok(DialogueOutput { fused, probs, shift })
    }

    /// Eval-mode fused features and class distributions.
    pub fn infer<F: Real>(&self, store: &ParamStore<F>, conv: &Conversation) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, conv, &mut Passes::eval(), false)?;
        Ok((g.value(out.fused).clone(), g.value(out.probs).clone()))
    }
}

/// `None` when `n <= cap`; otherwise `cap²` distinct ordered pairs drawn
/// uniformly and returned in row-major order.
pub fn sample_pairs(n: usize, cap: usize, rng: &mut RngState) -> Option<Vec<(usize, usize)>> {
    if n <= cap {
        return None;
    }
    let total = n * n;
    let k = cap * cap;
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..k {
        let j = i + rng.below(total - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    Some(idx.into_iter().map(|p| (p / n, p % n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_corpus, SynthSpec};

    fn tiny(encoder: EncoderKind) -> (ModelConfig, crate::data::Corpus) {
        let spec = SynthSpec {
            dims: FeatureDims { text: 5, visual: 4, audio: 3 },
            train_dialogues: 2,
            val_dialogues: 1,
            test_dialogues: 1,
            utterances: 4,
            classes: 3,
            ..Default::default()
        };
        let corpus = synth_corpus(&spec).unwrap();
        let mut cfg = ModelConfig::new(spec.dims, 3);
        cfg.model_dim = 8;
        cfg.heads = 2;
        cfg.rume_depth = 1;
        cfg.acme_depth = 1;
        cfg.encoder = encoder;
        (cfg, corpus)
    }

    #[test]
    fn shapes_for_every_encoder() {
        for e in EncoderKind::ALL {
            let (cfg, corpus) = tiny(e);
            let mut store = ParamStore::<f64>::new();
            let model = FusionModel::new(&cfg, &mut store, 1).unwrap();
            let mut g = Graph::new(&store);
            let out = model.forward(&mut g, &corpus.train[0], &mut Passes::train(3), true).unwrap();
            assert_eq!(g.value(out.fused).shape(), &[4, 24]);
            assert_eq!(g.value(out.probs).shape(), &[4, 3]);
            let s = out.shift.unwrap();
            assert_eq!(g.value(s.probs).shape(), &[16, 2]);
            assert_eq!(s.targets, shift_labels(&corpus.train[0].labels()).targets());
        }
    }

    #[test]
    fn shift_head_allocated_regardless_of_switch() {
        let (mut cfg, _) = tiny(EncoderKind::Acme);
        let mut a = ParamStore::<f64>::new();
        FusionModel::new(&cfg, &mut a, 5).unwrap();
        cfg.use_lesm = false;
        let mut b = ParamStore::<f64>::new();
        FusionModel::new(&cfg, &mut b, 5).unwrap();
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn dimension_mismatch_names_axis() {
        let (mut cfg, corpus) = tiny(EncoderKind::Acme);
        cfg.dims.visual = 7;
        let mut store = ParamStore::<f64>::new();
        let model = FusionModel::new(&cfg, &mut store, 1).unwrap();
        let err = model.infer(&store, &corpus.test[0]).unwrap_err();
        assert_eq!(err, Error::shape("model input", "visual feature width", 7, 4));
    }

    #[test]
    fn config_validation() {
        let (cfg, _) = tiny(EncoderKind::Acme);
        assert!(ModelConfig { heads: 3, ..cfg.clone() }.validate().is_err());
        assert!(ModelConfig { model_dim: 7, heads: 7, ..cfg.clone() }.validate().is_err());
        assert!(ModelConfig { acme_dropout: 1.0, ..cfg.clone() }.validate().is_err());
        assert!(ModelConfig { acme_depth: 0, use_acme: false, ..cfg }.validate().is_ok());
    }

    #[test]
    fn pair_sampling() {
        let mut rng = RngState::new(1);
        assert!(sample_pairs(4, 4, &mut rng).is_none());
        let p = sample_pairs(5, 3, &mut rng).unwrap();
        assert_eq!(p.len(), 9);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert!(p.iter().all(|&(i, j)| i < 5 && j < 5));
    }

    #[test]
    fn sampled_pairs_feed_the_shift_head() {
        let (mut cfg, corpus) = tiny(EncoderKind::Acme);
        cfg.shift_pair_cap = 2;
        let mut store = ParamStore::<f64>::new();
        let model = FusionModel::new(&cfg, &mut store, 1).unwrap();
        let mut g = Graph::new(&store);
        let out = model.forward(&mut g, &corpus.train[0], &mut Passes::train(3), true).unwrap();
        let s = out.shift.unwrap();
        assert_eq!(g.value(s.probs).shape(), &[4, 2]);
        let full = shift_labels(&corpus.train[0].labels());
        for (&(i, j), &t) in s.pairs.as_ref().unwrap().iter().zip(&s.targets) {
            assert_eq!(full.get(i, j) as usize, t);
        }
    }
}
