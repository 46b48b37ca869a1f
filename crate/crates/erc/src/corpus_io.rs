//! On-disk corpus format.
//!
//! A corpus is a JSON manifest next to one JSON-lines file per split. Each
//! line holds one conversation; feature vectors are base64 strings of
//! little-endian 32-bit floats so values survive a round trip bit for bit.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "name": "meld",
//!   "emotions": ["neutral", "joy"],
//!   "dims": {"text": 600, "visual": 342, "audio": 300},
//!   "splits": {"train": "train.jsonl", "val": "val.jsonl", "test": "test.jsonl"},
//!   "counts": {"train": {"dialogues": 1039, "utterances": 9989}}
//! }
//! ```
//!
//! and per line
//!
//! ```json
//! {"id": "d0", "utterances": [{"speaker": "A", "label": "joy",
//!   "text": "AACAPw==", "visual": "...", "audio": "..."}]}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use erc_core::data::{Conversation, Corpus, FeatureDims, Split, SplitCounts, Utterance, DEFAULT_MAX_UTTERANCES};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFiles {
    pub train: String,
    pub val: String,
    pub test: String,
}

impl SplitFiles {
    pub fn get(&self, s: Split) -> &str {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub emotions: Vec<String>,
    pub dims: FeatureDims,
    pub splits: SplitFiles,
    /// Optional expected sizes per split, checked on load.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<Split, SplitCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_utterances: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    speaker: String,
    label: String,
    text: Option<String>,
    visual: Option<String>,
    audio: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConversationRecord {
    id: String,
    utterances: Vec<UtteranceRecord>,
}

pub fn encode_features(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_features(s: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = STANDARD.decode(s).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of 32-bit floats", bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format_version {} (expected {FORMAT_VERSION})", m.format_version),
        ));
    }
    Ok(m)
}

fn read_split(path: &Path, split: Split, labels: &BTreeMap<&str, usize>) -> Result<Vec<Conversation>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ConversationRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        let d = out.len();
        let mut utterances = Vec::with_capacity(rec.utterances.len());
        for (k, u) in rec.utterances.into_iter().enumerate() {
            let at = |what: String| {
                erc_core::Error::Validation(format!("{split} dialogue #{d} ({:?}) utterance {k}: {what}", rec.id))
            };
            let label = *labels.get(u.label.as_str()).ok_or_else(|| at(format!("unknown label {:?}", u.label)))?;
            let mut feats = [("text", u.text), ("visual", u.visual), ("audio", u.audio)].map(|(name, v)| {
                let v = v.ok_or_else(|| at(format!("missing {name} features")))?;
                decode_features(&v).map_err(|e| at(format!("{name} features: {e}")))
            });
            let take = |r: &mut std::result::Result<Vec<f32>, erc_core::Error>| std::mem::replace(r, Ok(Vec::new()));
            let (text, visual, audio) = (take(&mut feats[0])?, take(&mut feats[1])?, take(&mut feats[2])?);
            utterances.push(Utterance { speaker: u.speaker, label, text, visual, audio });
        }
        out.push(Conversation { id: rec.id, utterances });
    }
    Ok(out)
}

/// Reads and validates the corpus described by the manifest at `path`.
/// Split file names are resolved relative to the manifest.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let manifest = read_manifest(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let labels: BTreeMap<&str, usize> = manifest.emotions.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
    if labels.len() != manifest.emotions.len() {
        return Err(Error::format(path, "duplicate emotion names"));
    }
    let mut splits = Split::ALL.map(|_| Vec::new());
    for (slot, s) in Split::ALL.into_iter().enumerate() {
        splits[slot] = read_split(&dir.join(manifest.splits.get(s)), s, &labels)?;
    }
    let [train, val, test] = splits;
    let corpus = Corpus {
        name: manifest.name.clone(),
        emotions: manifest.emotions.clone(),
        dims: manifest.dims,
        train,
        val,
        test,
    };
    corpus.validate(manifest.max_utterances.unwrap_or(DEFAULT_MAX_UTTERANCES))?;
    let summary = corpus.summary();
    for (s, declared) in &manifest.counts {
        let actual = match s {
            Split::Train => summary.train,
            Split::Val => summary.val,
            Split::Test => summary.test,
        };
        if *declared != actual {
            return Err(Error::format(
                path,
                format!(
                    "{s} declares {} dialogues / {} utterances but contains {} / {}",
                    declared.dialogues, declared.utterances, actual.dialogues, actual.utterances
                ),
            ));
        }
    }
    Ok(corpus)
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes `corpus` into `dir` (created if needed) and returns the manifest
/// path. Declared counts are filled in from the corpus.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = corpus.summary();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: corpus.name.clone(),
        emotions: corpus.emotions.clone(),
        dims: corpus.dims,
        splits: SplitFiles { train: "train.jsonl".into(), val: "val.jsonl".into(), test: "test.jsonl".into() },
        counts: [(Split::Train, summary.train), (Split::Val, summary.val), (Split::Test, summary.test)]
            .into_iter()
            .collect(),
        max_utterances: None,
    };
    for s in Split::ALL {
        let path = dir.join(manifest.splits.get(s));
        let mut w = create_file(&path)?;
        for conv in corpus.split(s) {
            let rec = ConversationRecord {
                id: conv.id.clone(),
                utterances: conv
                    .utterances
                    .iter()
                    .map(|u| UtteranceRecord {
                        speaker: u.speaker.clone(),
                        label: corpus.emotions[u.label].clone(),
                        text: Some(encode_features(&u.text)),
                        visual: Some(encode_features(&u.visual)),
                        audio: Some(encode_features(&u.audio)),
                    })
                    .collect(),
            };
            let line = serde_json::to_string(&rec).expect("records serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_codec_is_bit_exact() {
        let v = [0.0f32, -0.0, 1.5, f32::MIN_POSITIVE, 1e-40, -3.25e7];
        let back = decode_features(&encode_features(&v)).unwrap();
        assert_eq!(v.map(f32::to_bits).to_vec(), back.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(encode_features(&[1.0]), "AACAPw==");
        assert!(decode_features("AACA").is_err());
    }
}
