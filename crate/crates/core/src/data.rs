//! Corpus schema, validation, modal-setting arrangements, emotion-shift
//! labels and sentiment coarsening.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_MAX_UTTERANCES: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// Stored for completeness; the model never reads it.
    pub speaker: String,
    pub label: usize,
    pub text: Vec<f32>,
    pub visual: Vec<f32>,
    pub audio: Vec<f32>,
}

impl Utterance {
    pub fn features(&self, m: Modality) -> &[f32] {
        match m {
            Modality::Text => &self.text,
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub text: usize,
    pub visual: usize,
    pub audio: usize,
}

impl FeatureDims {
    pub fn of(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Visual => self.visual,
            Modality::Audio => self.audio,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub emotions: Vec<String>,
    pub dims: FeatureDims,
    pub train: Vec<Conversation>,
    pub val: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub dialogues: usize,
    pub utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub name: String,
    pub emotions: Vec<String>,
    pub dims: FeatureDims,
    pub train: SplitCounts,
    pub val: SplitCounts,
    pub test: SplitCounts,
}

impl fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {} emotions, dims text={} visual={} audio={}",
            self.name,
            self.emotions.len(),
            self.dims.text,
            self.dims.visual,
            self.dims.audio
        )?;
        for (name, c) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            writeln!(f, "  {name:<5} {:>6} dialogues {:>7} utterances", c.dialogues, c.utterances)?;
        }
        Ok(())
    }
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Conversation] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, s: Split) -> &mut Vec<Conversation> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.emotions.len()
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.emotions.iter().position(|e| e == name)
    }

    pub fn summary(&self) -> CorpusSummary {
        let counts = |s: Split| SplitCounts {
            dialogues: self.split(s).len(),
            utterances: self.split(s).iter().map(Conversation::len).sum(),
        };
        CorpusSummary {
            name: self.name.clone(),
            emotions: self.emotions.clone(),
            dims: self.dims,
            train: counts(Split::Train),
            val: counts(Split::Val),
            test: counts(Split::Test),
        }
    }

    /// Checks every structural invariant; errors carry split, dialogue and
    /// utterance coordinates.
    pub fn validate(&self, max_utterances: usize) -> Result<()> {
        if self.emotions.is_empty() {
            return Err(Error::Validation("emotion vocabulary is empty".to_string()));
        }
        for (i, e) in self.emotions.iter().enumerate() {
            if self.emotions[..i].contains(e) {
                return Err(Error::Validation(format!("duplicate emotion {e:?} in vocabulary")));
            }
        }
        for s in Split::ALL {
            let convs = self.split(s);
            if convs.is_empty() {
                return Err(Error::Validation(format!("{}: split contains zero conversations", s.name())));
            }
            for (ci, c) in convs.iter().enumerate() {
                let at = || format!("{} dialogue #{ci} ({:?})", s.name(), c.id);
                if c.utterances.is_empty() {
                    return Err(Error::Validation(format!("{}: conversation has no utterances", at())));
                }
                if c.utterances.len() > max_utterances {
                    return Err(Error::Validation(format!(
                        "{}: {} utterances exceed the limit of {max_utterances}",
                        at(),
                        c.utterances.len()
                    )));
                }
                for (ui, u) in c.utterances.iter().enumerate() {
                    if u.label >= self.emotions.len() {
                        return Err(Error::Validation(format!(
                            "{} utterance {ui}: label index {} outside vocabulary of {}",
                            at(),
                            u.label,
                            self.emotions.len()
                        )));
                    }
                    for m in Modality::ALL {
                        let v = u.features(m);
                        if v.is_empty() {
                            return Err(Error::Validation(format!(
                                "{} utterance {ui}: missing {} features",
                                at(),
                                m.name()
                            )));
                        }
                        if v.len() != self.dims.of(m) {
                            return Err(Error::Validation(format!(
                                "{} utterance {ui}: {} features have {} values, expected {}",
                                at(),
                                m.name(),
                                v.len(),
                                self.dims.of(m)
                            )));
                        }
                        if v.iter().any(|x| !x.is_finite()) {
                            return Err(Error::Validation(format!(
                                "{} utterance {ui}: non-finite {} feature",
                                at(),
                                m.name()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Visual, Modality::Audio];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        }
    }
}

/// Which modalities feed the three encoder streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModalSetting {
    #[serde(rename = "TVA")]
    Tva,
    #[serde(rename = "TV")]
    Tv,
    #[serde(rename = "TA")]
    Ta,
    #[serde(rename = "VA")]
    Va,
    #[serde(rename = "T")]
    T,
    #[serde(rename = "V")]
    V,
    #[serde(rename = "A")]
    A,
}

impl ModalSetting {
    pub const ALL: [ModalSetting; 7] = [
        ModalSetting::Tva,
        ModalSetting::Tv,
        ModalSetting::Ta,
        ModalSetting::Va,
        ModalSetting::T,
        ModalSetting::V,
        ModalSetting::A,
    ];

    /// Modalities of the three streams. Stream 0 plays the textual role in
    /// the cross-modal encoder.
    pub fn streams(self) -> [Modality; 3] {
        use Modality::*;
        match self {
            ModalSetting::Tva => [Text, Visual, Audio],
            ModalSetting::Tv => [Text, Visual, Visual],
            ModalSetting::Ta => [Text, Audio, Audio],
            ModalSetting::Va => [Visual, Audio, Audio],
            ModalSetting::T => [Text, Text, Text],
            ModalSetting::V => [Visual, Visual, Visual],
            ModalSetting::A => [Audio, Audio, Audio],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalSetting::Tva => "TVA",
            ModalSetting::Tv => "TV",
            ModalSetting::Ta => "TA",
            ModalSetting::Va => "VA",
            ModalSetting::T => "T",
            ModalSetting::V => "V",
            ModalSetting::A => "A",
        }
    }
}

impl fmt::Display for ModalSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModalSetting::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown modal setting {s:?}")))
    }
}

/// Utterance features of one modality for one dialogue, `|U| x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalTensor<F> {
    pub modality: Modality,
    pub features: Tensor<F>,
    /// Per-utterance validity; every entry is `true` for an unpadded dialogue.
    pub valid: Vec<bool>,
}

fn modal_tensor<F: Real>(conv: &Conversation, m: Modality) -> ModalTensor<F> {
    let d = conv.utterances[0].features(m).len();
    let data = conv.utterances.iter().flat_map(|u| u.features(m).iter().map(|&x| F::of(x as f64))).collect();
    ModalTensor {
        modality: m,
        features: Tensor::new(vec![conv.len(), d], data).expect("validated corpus"),
        valid: vec![true; conv.len()],
    }
}

/// The three encoder inputs for `setting`, each built from the dialogue's
/// own features.
pub fn modal_inputs<F: Real>(conv: &Conversation, setting: ModalSetting) -> [ModalTensor<F>; 3] {
    setting.streams().map(|m| modal_tensor(conv, m))
}

/// Pairwise emotion-shift states of one dialogue: entry `(i, j)` is 0 when
/// utterances `i` and `j` carry the same gold emotion and 1 otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftLabelMatrix {
    n: usize,
    data: Vec<u8>,
}

impl ShiftLabelMatrix {
    pub fn from_raw(n: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::shape("shift_labels", "entries", n * n, data.len()));
        }
        Ok(ShiftLabelMatrix { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.n + j]
    }

    /// Row-major entries, one per ordered pair.
    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn targets(&self) -> Vec<usize> {
        self.data.iter().map(|&s| s as usize).collect()
    }
}

pub fn shift_labels(labels: &[usize]) -> ShiftLabelMatrix {
    let n = labels.len();
    let data = labels.iter().flat_map(|a| labels.iter().map(move |b| u8::from(a != b))).collect();
    ShiftLabelMatrix { n, data }
}

/// Label coarsening from a source vocabulary onto a target vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentimentScheme {
    pub target: Vec<String>,
    pub mapping: BTreeMap<String, String>,
}

impl SentimentScheme {
    /// sad, angry and frustrated become negative; happy and excited become
    /// positive; neutral stays neutral.
    pub fn iemocap() -> Self {
        let target = ["neutral", "positive", "negative"].map(String::from).to_vec();
        let mapping = [
            ("neutral", "neutral"),
            ("happy", "positive"),
            ("excited", "positive"),
            ("sad", "negative"),
            ("angry", "negative"),
            ("frustrated", "negative"),
        ]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        SentimentScheme { target, mapping }
    }

    pub fn identity(vocab: &[String]) -> Self {
        SentimentScheme { target: vocab.to_vec(), mapping: vocab.iter().map(|e| (e.clone(), e.clone())).collect() }
    }
}

/// Relabels every utterance through `scheme`; the corpus vocabulary becomes
/// `scheme.target`.
pub fn map_to_sentiment(corpus: &Corpus, scheme: &SentimentScheme) -> Result<Corpus> {
    let mut lut = Vec::with_capacity(corpus.emotions.len());
    for e in &corpus.emotions {
        let tgt = scheme
            .mapping
            .get(e)
            .ok_or_else(|| Error::Validation(format!("emotion {e:?} has no sentiment mapping")))?;
        let idx = scheme
            .target
            .iter()
            .position(|t| t == tgt)
            .ok_or_else(|| Error::Validation(format!("mapping target {tgt:?} is not in the target vocabulary")))?;
        lut.push(idx);
    }
    let mut out = corpus.clone();
    out.emotions = scheme.target.clone();
    for s in Split::ALL {
        for c in out.split_mut(s) {
            for u in &mut c.utterances {
                u.label = lut[u.label];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(label: usize, dims: (usize, usize, usize), base: f32) -> Utterance {
        Utterance {
            speaker: "A".into(),
            label,
            text: vec![base; dims.0],
            visual: vec![base + 1.0; dims.1],
            audio: vec![base + 2.0; dims.2],
        }
    }

    fn tiny(emotions: &[&str], labels: &[usize]) -> Corpus {
        let conv = Conversation {
            id: "d0".into(),
            utterances: labels.iter().enumerate().map(|(i, &l)| utt(l, (4, 3, 2), i as f32)).collect(),
        };
        Corpus {
            name: "tiny".into(),
            emotions: emotions.iter().map(|s| s.to_string()).collect(),
            dims: FeatureDims { text: 4, visual: 3, audio: 2 },
            train: vec![conv.clone()],
            val: vec![conv.clone()],
            test: vec![conv],
        }
    }

    #[test]
    fn shift_label_examples() {
        let s = shift_labels(&[0, 0, 1]);
        assert_eq!(s.as_slice(), &[0, 0, 1, 0, 0, 1, 1, 1, 0]);
        assert!(shift_labels(&[2, 2, 2, 2]).as_slice().iter().all(|&v| v == 0));
        let s = shift_labels(&[0, 1, 2]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.get(i, j), u8::from(i != j));
            }
        }
    }

    proptest! {
        #[test]
        fn shift_labels_symmetric_zero_diagonal(labels in prop::collection::vec(0usize..7, 1..30)) {
            let s = shift_labels(&labels);
            for i in 0..labels.len() {
                prop_assert_eq!(s.get(i, i), 0);
                for j in 0..labels.len() {
                    prop_assert_eq!(s.get(i, j), s.get(j, i));
                }
            }
        }
    }

    #[test]
    fn modal_settings_arrange_streams() {
        let c = tiny(&["a", "b"], &[0, 1]);
        let conv = &c.train[0];
        let [x1, x2, x3] = modal_inputs::<f64>(conv, ModalSetting::Ta);
        assert_eq!(x1.modality, Modality::Text);
        assert_eq!(x2, x3);
        assert_eq!(x2.modality, Modality::Audio);
        let [a, b, cc] = modal_inputs::<f64>(conv, ModalSetting::T);
        assert_eq!(a, b);
        assert_eq!(b, cc);
        let [t, v, au] = modal_inputs::<f64>(conv, ModalSetting::Tva);
        assert_eq!(t.features.shape(), &[2, 4]);
        assert_eq!(v.features.shape(), &[2, 3]);
        assert_eq!(au.features.shape(), &[2, 2]);
        assert_ne!(t.features.data(), v.features.data());
        let [v1, a2, a3] = modal_inputs::<f64>(conv, ModalSetting::Va);
        assert_eq!(v1.modality, Modality::Visual);
        assert_eq!((a2.modality, a3.modality), (Modality::Audio, Modality::Audio));
        assert_eq!("tv".parse::<ModalSetting>().unwrap(), ModalSetting::Tv);
    }

    #[test]
    fn validation_reports_coordinates() {
        let mut c = tiny(&["a", "b"], &[0, 1]);
        assert!(c.validate(DEFAULT_MAX_UTTERANCES).is_ok());
        c.val[0].utterances[1].visual.pop();
        let msg = c.validate(DEFAULT_MAX_UTTERANCES).unwrap_err().to_string();
        assert!(msg.contains("val dialogue #0") && msg.contains("utterance 1") && msg.contains("visual"), "{msg}");

        let mut c = tiny(&["a", "b"], &[0, 1]);
        c.test[0].utterances[0].label = 5;
        assert!(c.validate(DEFAULT_MAX_UTTERANCES).unwrap_err().to_string().contains("label index 5"));

        let mut c = tiny(&["a", "b"], &[0, 1]);
        c.train[0].utterances[0].audio.clear();
        assert!(c.validate(DEFAULT_MAX_UTTERANCES).unwrap_err().to_string().contains("missing audio"));

        let mut c = tiny(&["a", "b"], &[0, 1]);
        c.val.clear();
        assert!(c
            .validate(DEFAULT_MAX_UTTERANCES)
            .unwrap_err()
            .to_string()
            .contains("split contains zero conversations"));

        let c = tiny(&["a", "b"], &[0, 1, 0]);
        assert!(c.validate(2).is_err());
    }

    #[test]
    fn iemocap_sentiment_merge() {
        let emotions = ["happy", "sad", "neutral", "angry", "excited", "frustrated"];
        let c = tiny(&emotions, &[0, 5, 2]);
        let s = map_to_sentiment(&c, &SentimentScheme::iemocap()).unwrap();
        assert_eq!(s.num_classes(), 3);
        let names: Vec<&str> = s.train[0].labels().iter().map(|&l| s.emotions[l].as_str()).collect();
        assert_eq!(names, ["positive", "negative", "neutral"]);

        let all_neutral = tiny(&emotions, &[2, 2]);
        let s = map_to_sentiment(&all_neutral, &SentimentScheme::iemocap()).unwrap();
        assert!(s.train[0].labels().iter().all(|&l| s.emotions[l] == "neutral"));
    }

    #[test]
    fn identity_scheme_is_noop_and_unmapped_fails() {
        let c = tiny(&["neutral", "positive", "negative"], &[0, 2, 1]);
        let same = map_to_sentiment(&c, &SentimentScheme::identity(&c.emotions)).unwrap();
        assert_eq!(same, c);
        let odd = tiny(&["joy", "sadness"], &[0]);
        assert!(map_to_sentiment(&odd, &SentimentScheme::iemocap()).is_err());
    }
}
