//! Synthetic corpora with Gaussian class clusters.
//!
//! Every class owns one centre per modality; an utterance's features are its
//! class centre plus isotropic noise. Labels follow a Markov chain that keeps
//! the previous label with probability `1 - shift_rate` and otherwise moves
//! to a uniformly chosen different class.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Conversation, Corpus, FeatureDims, Modality, Utterance};
use crate::error::{Error, Result};
use crate::rng::{streams, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_dialogues: usize,
    pub val_dialogues: usize,
    pub test_dialogues: usize,
    pub utterances: usize,
    pub dims: FeatureDims,
    /// Distance between any two class centres, in units of `noise`.
    pub separation: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    pub shift_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            train_dialogues: 60,
            val_dialogues: 10,
            test_dialogues: 10,
            utterances: 10,
            dims: FeatureDims { text: 16, visual: 12, audio: 8 },
            separation: 3.0,
            noise: 1.0,
            shift_rate: 0.4,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("classes", self.classes),
            ("train_dialogues", self.train_dialogues),
            ("val_dialogues", self.val_dialogues),
            ("test_dialogues", self.test_dialogues),
            ("utterances", self.utterances),
            ("dims.text", self.dims.text),
            ("dims.visual", self.dims.visual),
            ("dims.audio", self.dims.audio),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synth.{field} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("synth.classes must be at least 2".into()));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!("synth.separation must be positive, got {}", self.separation)));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("synth.noise must be positive, got {}", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.shift_rate) {
            return Err(Error::Config(format!("synth.shift_rate must lie in [0, 1], got {}", self.shift_rate)));
        }
        Ok(())
    }
}

/// Class centres for one modality. With enough coordinates the centres sit
/// on scaled basis vectors so every pair is exactly `separation * noise`
/// apart; otherwise they are random directions of the same radius.
fn centres(classes: usize, dim: usize, offset: usize, radius: f64, rng: &mut RngState) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let mut v = alloc::vec![0.0; dim];
            if dim >= classes {
                v[(c + offset) % dim] = radius;
            } else {
                for x in v.iter_mut() {
                    *x = rng.normal();
                }
                let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
                v.iter_mut().for_each(|x| *x *= radius / norm);
            }
            v
        })
        .collect()
}

fn features(centre: &[f64], noise: f64, rng: &mut RngState) -> Vec<f32> {
    centre.iter().map(|&c| (c + noise * rng.normal()) as f32).collect()
}

/// Builds a corpus that depends only on `spec`.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = RngState::with_stream(spec.seed, streams::SYNTH);
    let radius = spec.separation * spec.noise / core::f64::consts::SQRT_2;
    let modalities = [Modality::Text, Modality::Visual, Modality::Audio];
    let table: Vec<Vec<Vec<f64>>> = modalities
        .iter()
        .enumerate()
        .map(|(k, &m)| centres(spec.classes, spec.dims.of(m), k, radius, &mut rng))
        .collect();
    let mut split = |name: &str, count: usize| -> Vec<Conversation> {
        (0..count)
            .map(|d| {
                let mut label = rng.below(spec.classes);
                let utterances = (0..spec.utterances)
                    .map(|i| {
                        if i > 0 && rng.uniform() < spec.shift_rate {
                            label = (label + 1 + rng.below(spec.classes - 1)) % spec.classes;
                        }
                        Utterance {
                            speaker: format!("s{}", i % 2),
                            label,
                            text: features(&table[0][label], spec.noise, &mut rng),
                            visual: features(&table[1][label], spec.noise, &mut rng),
                            audio: features(&table[2][label], spec.noise, &mut rng),
                        }
                    })
                    .collect();
                Conversation { id: format!("{name}-{d}"), utterances }
            })
            .collect()
    };
    let train = split("train", spec.train_dialogues);
    let val = split("val", spec.val_dialogues);
    let test = split("test", spec.test_dialogues);
    Ok(Corpus {
        name: String::from("synthetic"),
        emotions: (0..spec.classes).map(|c| format!("class{c}")).collect(),
        dims: spec.dims,
        train,
        val,
        test,
    })
}
