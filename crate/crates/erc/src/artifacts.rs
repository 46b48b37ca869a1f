//! Output files written next to a run: history, metrics, confusion matrix,
//! predictions and embeddings.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use erc_core::data::Conversation;
use erc_core::metrics::MetricsReport;
use erc_core::train::EpochRecord;
use erc_core::{Real, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub emotion: String,
    pub f1: f64,
    pub support: u64,
}

/// Metrics of one split in the JSON layout written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub classes: Vec<ClassMetrics>,
    /// Rows are gold labels, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub shift_f1: Option<f64>,
}

impl SplitMetrics {
    pub fn new(split: &str, emotions: &[String], r: &MetricsReport) -> Self {
        SplitMetrics {
            split: split.to_string(),
            accuracy: r.accuracy,
            weighted_f1: r.weighted_f1,
            classes: emotions
                .iter()
                .zip(&r.per_class_f1)
                .zip(&r.support)
                .map(|((e, &f1), &support)| ClassMetrics { emotion: e.clone(), f1, support })
                .collect(),
            confusion: r.confusion.counts.clone(),
            shift_f1: r.shift_f1,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Appends epoch records as JSON lines.
pub struct HistoryWriter {
    path: std::path::PathBuf,
    out: BufWriter<fs::File>,
}

impl HistoryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(HistoryWriter { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    pub fn append(&mut self, r: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, e.to_string())
}

/// `gold\predicted` header row, then one row per gold emotion.
pub fn write_confusion_csv(path: &Path, emotions: &[String], counts: &[Vec<u64>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    let mut header = vec!["gold\\predicted".to_string()];
    header.extend(emotions.iter().cloned());
    w.write_record(&header).map_err(&err)?;
    for (e, row) in emotions.iter().zip(counts) {
        let mut rec = vec![e.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per utterance: dialogue, index, gold and predicted emotion.
pub fn write_predictions_csv(
    path: &Path,
    emotions: &[String],
    dialogues: &[Conversation],
    preds: &[Vec<usize>],
) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["dialogue", "utterance", "gold", "predicted"]).map_err(&err)?;
    for (conv, p) in dialogues.iter().zip(preds) {
        for (i, (u, &k)) in conv.utterances.iter().zip(p).enumerate() {
            w.write_record([conv.id.as_str(), &i.to_string(), &emotions[u.label], &emotions[k]]).map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fused features per utterance, identified as `dialogue#index`.
pub fn write_embeddings_csv<F: Real>(
    path: &Path,
    emotions: &[String],
    dialogues: &[Conversation],
    preds: &[Vec<usize>],
    fused: &[Tensor<F>],
) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    let width = fused.first().map_or(0, Tensor::cols);
    let mut header = vec!["utterance".to_string(), "gold".into(), "predicted".into()];
    header.extend((0..width).map(|k| format!("h{k}")));
    w.write_record(&header).map_err(&err)?;
    for ((conv, p), h) in dialogues.iter().zip(preds).zip(fused) {
        for (i, u) in conv.utterances.iter().enumerate() {
            let mut rec = vec![format!("{}#{i}", conv.id), emotions[u.label].clone(), emotions[p[i]].clone()];
            rec.extend(h.row(i).iter().map(|x| x.as_f64().to_string()));
            w.write_record(&rec).map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
