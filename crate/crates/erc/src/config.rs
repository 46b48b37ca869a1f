//! Experiment configuration files.
//!
//! A config names a corpus source and a preset, and may override any field
//! of the preset's model, training and objective settings:
//!
//! ```json
//! {
//!   "corpus": {"synthetic": {"classes": 4, "seed": 7, ...}},
//!   "preset": "synthetic",
//!   "model": {"encoder": "TFE2", "use_lesm": false},
//!   "train": {"epochs": 20},
//!   "objective": {"lambda": {"mode": "automatic"}}
//! }
//! ```
//!
//! Resolution fills every field, so the effective config written next to
//! the artifacts reproduces the run on its own.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use erc_core::data::{map_to_sentiment, Corpus, SentimentScheme};
use erc_core::model::ModelConfig;
use erc_core::objective::ObjectiveConfig;
use erc_core::synth::{synth_corpus, SynthSpec};
use erc_core::train::{Preset, TrainConfig};

use crate::corpus_io::load_corpus;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum CorpusSource {
    /// Path to a corpus manifest, relative to the config file.
    Manifest(PathBuf),
    Synthetic(SynthSpec),
}

/// A built-in label coarsening by name, or an explicit one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemeSpec {
    Named(String),
    Custom(SentimentScheme),
}

impl SchemeSpec {
    pub fn resolve(&self) -> Result<SentimentScheme> {
        match self {
            SchemeSpec::Named(n) if n.eq_ignore_ascii_case("iemocap") => Ok(SentimentScheme::iemocap()),
            SchemeSpec::Named(n) => Err(Error::Config(format!("sentiment: unknown scheme {n:?}"))),
            SchemeSpec::Custom(s) => Ok(s.clone()),
        }
    }

    /// `iemocap` or a path to a JSON scheme file.
    pub fn from_arg(arg: &str) -> Result<SentimentScheme> {
        if arg.eq_ignore_ascii_case("iemocap") {
            return Ok(SentimentScheme::iemocap());
        }
        crate::artifacts::read_json(Path::new(arg))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    /// Coarsens labels before training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentiment: Option<SchemeSpec>,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default = "empty")]
    pub model: Value,
    #[serde(default = "empty")]
    pub train: Value,
    #[serde(default = "empty")]
    pub objective: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_preset() -> Preset {
    Preset::Synthetic
}

fn empty() -> Value {
    Value::Object(Map::new())
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSource::Synthetic(SynthSpec::default()),
            sentiment: None,
            preset: Preset::Synthetic,
            model: empty(),
            train: empty(),
            objective: empty(),
            output_dir: None,
        }
    }
}

/// Everything a run needs, with the config that reproduces it.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub corpus: Corpus,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub objective: ObjectiveConfig,
    pub effective: ExperimentConfig,
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn section<T: Serialize + for<'de> Deserialize<'de>>(name: &str, base: &T, over: &Value) -> Result<(T, Value)> {
    if !over.is_object() {
        return Err(Error::Config(format!("{name}: expected an object")));
    }
    let mut v = serde_json::to_value(base).expect("config serializes");
    // a manual lambda override replaces the whole tagged value
    if let (Some(b), Some(o)) = (v.get_mut("lambda"), over.get("lambda")) {
        *b = o.clone();
    }
    merge(&mut v, over);
    let parsed = serde_path_to_error::deserialize(v.clone())
        .map_err(|e| Error::Config(format!("{name}.{}: {}", e.path(), e.inner())))?;
    Ok((parsed, v))
}

impl ExperimentConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("{}: {}: {}", path.display(), e.path(), e.inner())))?;
        if let CorpusSource::Manifest(p) = &mut cfg.corpus {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let corpus = match &self.corpus {
            CorpusSource::Manifest(p) => load_corpus(p)?,
            CorpusSource::Synthetic(spec) => synth_corpus(spec)?,
        };
        match &self.sentiment {
            Some(s) => Ok(map_to_sentiment(&corpus, &s.resolve()?)?),
            None => Ok(corpus),
        }
    }

    /// Loads the corpus and fills every setting from the preset plus
    /// overrides, validating the result.
    pub fn resolve(&self) -> Result<Resolved> {
        let corpus = self.load_corpus()?;
        let (m, t, o) = self.preset.configs(corpus.dims, corpus.num_classes());
        let (model, mv) = section("model", &m, &self.model)?;
        let (train, tv) = section("train", &t, &self.train)?;
        let (objective, ov) = section("objective", &o, &self.objective)?;
        let model: ModelConfig = model;
        if model.dims != corpus.dims || model.classes != corpus.num_classes() {
            return Err(Error::Config(format!(
                "model.dims/model.classes must match the corpus ({:?}, {} classes)",
                corpus.dims,
                corpus.num_classes()
            )));
        }
        model.validate()?;
        let train: TrainConfig = train;
        train.validate()?;
        let objective: ObjectiveConfig = objective;
        objective.validate()?;
        let mut effective = self.clone();
        if let CorpusSource::Manifest(p) = &mut effective.corpus {
            if let Ok(abs) = std::fs::canonicalize(&*p) {
                *p = abs;
            }
        }
        effective.model = mv;
        effective.train = tv;
        effective.objective = ov;
        Ok(Resolved { corpus, model, train, objective, effective })
    }

    /// Sets `section.key` in the override maps.
    pub fn set(&mut self, section: &str, key: &str, value: Value) {
        let target = match section {
            "model" => &mut self.model,
            "train" => &mut self.train,
            "objective" => &mut self.objective,
            other => panic!("unknown config section {other}"),
        };
        if !target.is_object() {
            *target = empty();
        }
        target.as_object_mut().expect("object").insert(key.to_string(), value);
    }
}
