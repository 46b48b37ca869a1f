//! Command-line entry points: `train`, `eval`, `ablate`, `gradcheck` and
//! `synth`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use erc_core::data::{map_to_sentiment, Corpus, ModalSetting, SentimentScheme, Split};
use erc_core::gradcheck::{check_model, GradCheckConfig, GradCheckReport, ModelCheckSpec};
use erc_core::metrics::{classification_report, spearman};
use erc_core::model::{EncoderKind, FusionModel, Precision};
use erc_core::objective::LambdaMode;
use erc_core::rng::derive_seed;
use erc_core::synth::{synth_corpus, SynthSpec};
use erc_core::train::{evaluate, train, EvalOptions, Preset};
use erc_core::{ParamStore, Real};

use crate::artifacts::{
    read_json, write_confusion_csv, write_embeddings_csv, write_json, write_predictions_csv, HistoryWriter,
    SplitMetrics,
};
use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{CorpusSource, ExperimentConfig, SchemeSpec};
use crate::corpus_io::{load_corpus, write_corpus};
use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "erc", version, about = "Multimodal emotion recognition in conversation")]
pub struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoint, history and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Train one model per cell of a grid and tabulate the results.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients of a tiny model.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic corpus.
    Synth(SynthArgs),
}

/// Overrides shared by `train` and `ablate`.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// Experiment config JSON; defaults to the synthetic preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus manifest, replacing the config's corpus source.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// meld, iemocap or synthetic.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fusion encoder: ACME, TFE1 or TFE2.
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    /// Modalities fed to the model, e.g. TVA, TA or V.
    #[arg(long)]
    pub modal: Option<ModalSetting>,
    /// Trade-off weight in [0, 1], or `auto` for learned task weights.
    #[arg(long)]
    pub lambda: Option<String>,
    /// Skip recurrent unimodal encoding.
    #[arg(long)]
    pub no_rume: bool,
    /// Replace the fusion encoder by concatenation of the unimodal streams.
    #[arg(long)]
    pub no_acme: bool,
    /// Drop the emotion-shift task.
    #[arg(long)]
    pub no_lesm: bool,
    /// f32 or f64.
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Label coarsening applied before training: `iemocap` or a JSON file.
    #[arg(long)]
    pub sentiment: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus manifest.
    #[arg(long, conflicts_with = "config")]
    pub corpus: Option<PathBuf>,
    /// Experiment config whose corpus source is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Coarsen labels before scoring: `iemocap` or a JSON scheme file.
    #[arg(long)]
    pub sentiment: Option<String>,
    /// Metrics JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated modal settings, or `all`.
    #[arg(long)]
    pub modal_settings: Option<String>,
    /// Comma-separated encoders, or `all`.
    #[arg(long)]
    pub encoders: Option<String>,
    /// Comma-separated λ values and/or `auto`; `sweep` means 0.1..1.0 and auto.
    #[arg(long)]
    pub lambdas: Option<String>,
    /// Comma-separated variants among full, no-rume, no-acme, no-lesm; or `all`.
    #[arg(long)]
    pub switches: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// ACME, TFE1, TFE2 or all.
    #[arg(long, default_value = "all")]
    pub encoder: String,
    /// A λ value, `auto`, or `all` (0.9 and auto).
    #[arg(long, default_value = "all")]
    pub lambda: String,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = GradCheckConfig::default().eps)]
    pub eps: f64,
    #[arg(long, default_value_t = 8)]
    pub model_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub utterances: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Check a loss multiplied by zero; every gradient must vanish.
    #[arg(long)]
    pub constant_loss: bool,
    /// Report JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Synthetic spec JSON; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub train_dialogues: Option<usize>,
    #[arg(long)]
    pub val_dialogues: Option<usize>,
    #[arg(long)]
    pub test_dialogues: Option<usize>,
    #[arg(long)]
    pub utterances: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub shift_rate: Option<f64>,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s}")),
    }
}

fn parse_lambda(s: &str) -> Result<Value> {
    if s.eq_ignore_ascii_case("auto") || s.eq_ignore_ascii_case("automatic") {
        return Ok(json!({"mode": "automatic"}));
    }
    let v: f64 =
        s.parse().map_err(|_| Error::Config(format!("objective.lambda: expected a number or `auto`, got {s:?}")))?;
    Ok(json!({"mode": "manual", "lambda": v}))
}

/// Progress messages on stderr unless quiet.
#[derive(Clone, Copy)]
pub struct Log(pub bool);

impl Log {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

impl Overrides {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::read(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.corpus {
            cfg.corpus = CorpusSource::Manifest(p.clone());
        }
        if let Some(p) = self.preset {
            cfg.preset = p;
        }
        if let Some(s) = &self.sentiment {
            cfg.sentiment = Some(SchemeSpec::Named(s.clone()));
            if !s.eq_ignore_ascii_case("iemocap") {
                cfg.sentiment = Some(SchemeSpec::Custom(SchemeSpec::from_arg(s)?));
            }
        }
        let set = |cfg: &mut ExperimentConfig, sec: &str, key: &str, v: Value| cfg.set(sec, key, v);
        if let Some(v) = self.epochs {
            set(&mut cfg, "train", "epochs", json!(v));
        }
        if let Some(v) = self.seed {
            set(&mut cfg, "train", "seed", json!(v));
        }
        if let Some(v) = self.lr {
            set(&mut cfg, "train", "lr", json!(v));
        }
        if let Some(v) = self.batch_size {
            set(&mut cfg, "train", "batch_size", json!(v));
        }
        if let Some(v) = self.encoder {
            set(&mut cfg, "model", "encoder", json!(v));
        }
        if let Some(v) = self.modal {
            set(&mut cfg, "model", "modal_setting", json!(v));
        }
        if let Some(v) = &self.lambda {
            set(&mut cfg, "objective", "lambda", parse_lambda(v)?);
        }
        if self.no_rume {
            set(&mut cfg, "model", "use_rume", json!(false));
        }
        if self.no_acme {
            set(&mut cfg, "model", "use_acme", json!(false));
        }
        if self.no_lesm {
            set(&mut cfg, "model", "use_lesm", json!(false));
        }
        if let Some(p) = self.precision {
            set(&mut cfg, "model", "precision", json!(p));
        }
        Ok(cfg)
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let log = Log(cli.quiet);
    match cli.command {
        Command::Train(a) => cmd_train(&a, log).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a, log).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a, log).map(|_| ()),
        Command::Gradcheck(a) => cmd_gradcheck(&a, log).map(|_| ()),
        Command::Synth(a) => cmd_synth(&a, log).map(|_| ()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Contents of `metrics.json` written by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub best_epoch: usize,
    pub seed: u64,
    pub val: SplitMetrics,
    pub test: SplitMetrics,
    /// Rank correlation of the per-epoch validation shift F1 and weighted F1
    /// up to the selected epoch.
    pub shift_emotion_spearman: Option<f64>,
}

fn train_typed<F: Real>(cfg: &ExperimentConfig, out: &Path, log: Log) -> Result<TrainMetrics> {
    let r = cfg.resolve()?;
    create_dir(out)?;
    write_json(&out.join(EFFECTIVE_CONFIG_FILE), &r.effective)?;
    log.say(format!("{}", r.corpus.summary()).trim_end());
    let mut history = HistoryWriter::create(&out.join(HISTORY_FILE))?;
    let mut io_err = None;
    let outcome = train::<F>(&r.corpus, &r.model, &r.train, &r.objective, &mut |rec| {
        log.say(format!(
            "epoch {:>3}  L_c {:.4}  L_s {}  val acc {:.4}  val W-F1 {:.4}{}",
            rec.epoch,
            rec.loss_cls,
            rec.loss_shift.map_or("-".into(), |v| format!("{v:.4}")),
            rec.val_accuracy,
            rec.val_weighted_f1,
            if rec.best { "  *" } else { "" }
        ));
        if let Err(e) = history.append(rec) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let meta = CheckpointMeta {
        corpus: r.corpus.name.clone(),
        seed: r.train.seed,
        epoch: outcome.best_epoch,
        val_weighted_f1: outcome.best_val.weighted_f1,
        val_accuracy: outcome.best_val.accuracy,
    };
    checkpoint::save(&out.join(CHECKPOINT_FILE), &r.model, &r.corpus.emotions, meta, &outcome.store)?;
    let test = evaluate(&outcome.model, &outcome.store, &r.corpus.test, EvalOptions::default())?.report;
    let emotions = &r.corpus.emotions;
    write_confusion_csv(&out.join("confusion_val.csv"), emotions, &outcome.best_val.confusion.counts)?;
    write_confusion_csv(&out.join("confusion_test.csv"), emotions, &test.confusion.counts)?;
    let upto = &outcome.history[..outcome.best_epoch];
    let shift: Option<Vec<f64>> = upto.iter().map(|h| h.val_shift_f1).collect();
    let emo: Vec<f64> = upto.iter().map(|h| h.val_weighted_f1).collect();
    let metrics = TrainMetrics {
        best_epoch: outcome.best_epoch,
        seed: r.train.seed,
        val: SplitMetrics::new("val", emotions, &outcome.best_val),
        test: SplitMetrics::new("test", emotions, &test),
        shift_emotion_spearman: shift.and_then(|s| spearman(&s, &emo)),
    };
    write_json(&out.join(METRICS_FILE), &metrics)?;
    log.say(format!(
        "best epoch {}: val W-F1 {:.4}, test acc {:.4}, test W-F1 {:.4}",
        metrics.best_epoch, metrics.val.weighted_f1, metrics.test.accuracy, metrics.test.weighted_f1
    ));
    Ok(metrics)
}

fn train_experiment(cfg: &ExperimentConfig, out: &Path, log: Log) -> Result<TrainMetrics> {
    let precision =
        cfg.model.get("precision").and_then(|v| serde_json::from_value(v.clone()).ok()).unwrap_or(Precision::F32);
    match precision {
        Precision::F32 => train_typed::<f32>(cfg, out, log),
        Precision::F64 => train_typed::<f64>(cfg, out, log),
    }
}

pub fn cmd_train(a: &TrainArgs, log: Log) -> Result<TrainMetrics> {
    let cfg = a.overrides.experiment()?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("output_dir: pass --out or set output_dir in the config".into()))?;
    train_experiment(&cfg, &out, log)
}

fn eval_typed<F: Real>(
    ckpt: &checkpoint::Checkpoint,
    corpus: &Corpus,
    scheme: Option<&SentimentScheme>,
    a: &EvalArgs,
) -> Result<SplitMetrics> {
    let (model, store): (FusionModel, ParamStore<F>) = ckpt.restore()?;
    let emotions = &ckpt.header.emotions;
    let target_space = scheme.is_some_and(|s| &s.target == emotions);
    // a checkpoint trained on coarse labels scores a coarsened corpus
    // directly; otherwise predictions are coarsened after the fact
    let corpus = match scheme {
        Some(s) if target_space => map_to_sentiment(corpus, s)?,
        _ => corpus.clone(),
    };
    if &corpus.emotions != emotions {
        return Err(Error::Config(format!(
            "corpus emotions {:?} do not match checkpoint emotions {:?}",
            corpus.emotions, emotions
        )));
    }
    let dialogues = corpus.split(a.split);
    let keep = a.embeddings.is_some();
    let ev = evaluate(&model, &store, dialogues, EvalOptions { with_shift: false, keep_outputs: keep })?;
    let (names, report, dialogues, preds) = match scheme {
        Some(s) if !target_space => {
            let coarse = map_to_sentiment(&corpus, s)?;
            let lut: Vec<usize> = emotions
                .iter()
                .map(|e| s.target.iter().position(|t| *t == s.mapping[e]).expect("validated scheme"))
                .collect();
            let preds: Vec<Vec<usize>> = ev.predictions.iter().map(|p| p.iter().map(|&k| lut[k]).collect()).collect();
            let gold: Vec<usize> = coarse.split(a.split).iter().flat_map(|c| c.labels()).collect();
            let flat: Vec<usize> = preds.iter().flatten().copied().collect();
            let report = classification_report(&gold, &flat, s.target.len())?;
            (s.target.clone(), report, coarse.split(a.split).to_vec(), preds)
        }
        _ => (emotions.clone(), ev.report.clone(), dialogues.to_vec(), ev.predictions.clone()),
    };
    if let Some(p) = &a.confusion {
        write_confusion_csv(p, &names, &report.confusion.counts)?;
    }
    if let Some(p) = &a.predictions {
        write_predictions_csv(p, &names, &dialogues, &preds)?;
    }
    if let Some(p) = &a.embeddings {
        write_embeddings_csv(p, &names, &dialogues, &preds, &ev.fused)?;
    }
    Ok(SplitMetrics::new(a.split.name(), &names, &report))
}

pub fn cmd_eval(a: &EvalArgs, log: Log) -> Result<SplitMetrics> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let corpus = match (&a.corpus, &a.config) {
        (Some(p), _) => load_corpus(p)?,
        (None, Some(c)) => ExperimentConfig::read(c)?.load_corpus()?,
        (None, None) => return Err(Error::Config("eval needs --corpus or --config".into())),
    };
    let scheme = a.sentiment.as_deref().map(SchemeSpec::from_arg).transpose()?;
    let metrics = match ckpt.header.model.precision {
        Precision::F32 => eval_typed::<f32>(&ckpt, &corpus, scheme.as_ref(), a)?,
        Precision::F64 => eval_typed::<f64>(&ckpt, &corpus, scheme.as_ref(), a)?,
    };
    if let Some(p) = &a.out {
        write_json(p, &metrics)?;
    }
    log.say(format!(
        "{} split: {} classes, accuracy {:.4}, weighted F1 {:.4}",
        metrics.split,
        metrics.classes.len(),
        metrics.accuracy,
        metrics.weighted_f1
    ));
    println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    Ok(metrics)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: usize,
    pub modal_setting: String,
    pub encoder: String,
    pub lambda: String,
    pub variant: String,
    pub seed: u64,
    pub val_weighted_f1: Option<f64>,
    pub test_weighted_f1: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub error: Option<String>,
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()
}

const VARIANTS: [&str; 4] = ["full", "no-rume", "no-acme", "no-lesm"];

pub fn cmd_ablate(a: &AblateArgs, log: Log) -> Result<Vec<AblationRow>> {
    let base = a.overrides.experiment()?;
    let base_seed = base.resolve()?.train.seed;
    let modal: Vec<Option<ModalSetting>> = match a.modal_settings.as_deref() {
        None => vec![None],
        Some("all") => ModalSetting::ALL.into_iter().map(Some).collect(),
        Some(s) => split_list(s).iter().map(|x| x.parse().map(Some)).collect::<erc_core::Result<_>>()?,
    };
    let encoders: Vec<Option<EncoderKind>> = match a.encoders.as_deref() {
        None => vec![None],
        Some("all") => EncoderKind::ALL.into_iter().map(Some).collect(),
        Some(s) => split_list(s).iter().map(|x| x.parse().map(Some)).collect::<erc_core::Result<_>>()?,
    };
    let lambdas: Vec<Option<String>> = match a.lambdas.as_deref() {
        None => vec![None],
        Some("sweep") => {
            (1..=10).map(|k| Some(format!("{:.1}", k as f64 / 10.0))).chain([Some("auto".to_string())]).collect()
        }
        Some(s) => split_list(s).into_iter().map(Some).collect(),
    };
    for l in lambdas.iter().flatten() {
        parse_lambda(l)?;
    }
    let variants: Vec<String> = match a.switches.as_deref() {
        None => vec!["full".into()],
        Some("all") => VARIANTS.map(String::from).to_vec(),
        Some(s) => {
            let v = split_list(s);
            if let Some(bad) = v.iter().find(|x| !VARIANTS.contains(&x.as_str())) {
                return Err(Error::Config(format!("switches: unknown variant {bad:?}")));
            }
            v
        }
    };
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    for m in &modal {
        for e in &encoders {
            for l in &lambdas {
                for v in &variants {
                    let cell = rows.len();
                    let seed = derive_seed(base_seed, cell as u64);
                    let mut cfg = base.clone();
                    cfg.set("train", "seed", json!(seed));
                    if let Some(m) = m {
                        cfg.set("model", "modal_setting", json!(m));
                    }
                    if let Some(e) = e {
                        cfg.set("model", "encoder", json!(e));
                    }
                    if let Some(l) = l {
                        cfg.set("objective", "lambda", parse_lambda(l)?);
                    }
                    match v.as_str() {
                        "no-rume" => cfg.set("model", "use_rume", json!(false)),
                        "no-acme" => cfg.set("model", "use_acme", json!(false)),
                        "no-lesm" => cfg.set("model", "use_lesm", json!(false)),
                        _ => {}
                    }
                    let describe = |key: &str| cfg.model.get(key).and_then(Value::as_str).map(String::from);
                    let mut row = AblationRow {
                        cell,
                        modal_setting: describe("modal_setting").unwrap_or_else(|| "base".into()),
                        encoder: describe("encoder").unwrap_or_else(|| "base".into()),
                        lambda: l.clone().unwrap_or_else(|| "base".into()),
                        variant: v.clone(),
                        seed,
                        val_weighted_f1: None,
                        test_weighted_f1: None,
                        test_accuracy: None,
                        error: None,
                    };
                    log.say(format!(
                        "cell {cell}: {} {} lambda={} {}",
                        row.modal_setting, row.encoder, row.lambda, row.variant
                    ));
                    match train_experiment(&cfg, &a.out.join(format!("cell-{cell:03}")), Log(true)) {
                        Ok(mt) => {
                            row.val_weighted_f1 = Some(mt.val.weighted_f1);
                            row.test_weighted_f1 = Some(mt.test.weighted_f1);
                            row.test_accuracy = Some(mt.test.accuracy);
                        }
                        Err(err) => row.error = Some(err.to_string()),
                    }
                    rows.push(row);
                }
            }
        }
    }
    write_json(&a.out.join("summary.json"), &rows)?;
    let mut w = csv::Writer::from_path(a.out.join("summary.csv")).map_err(|e| Error::format(&a.out, e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::format(&a.out, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    println!(
        "{:>4}  {:<5} {:<5} {:<6} {:<8} {:>8} {:>8} {:>8}",
        "cell", "modal", "enc", "lambda", "variant", "val_WF1", "test_WF1", "test_acc"
    );
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.4}", v));
    for r in &rows {
        println!(
            "{:>4}  {:<5} {:<5} {:<6} {:<8} {:>8} {:>8} {:>8}{}",
            r.cell,
            r.modal_setting,
            r.encoder,
            r.lambda,
            r.variant,
            fmt(r.val_weighted_f1),
            fmt(r.test_weighted_f1),
            fmt(r.test_accuracy),
            r.error.as_ref().map_or(String::new(), |e| format!("  failed: {e}"))
        );
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRun {
    pub encoder: EncoderKind,
    pub lambda: LambdaMode,
    pub loss: f64,
    pub max_rel_error: f64,
    pub tensors: Vec<GradcheckTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckTensor {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

fn to_run(encoder: EncoderKind, lambda: LambdaMode, r: &GradCheckReport) -> GradcheckRun {
    GradcheckRun {
        encoder,
        lambda,
        loss: r.loss,
        max_rel_error: r.max_rel_error(),
        tensors: r
            .tensors
            .iter()
            .map(|t| GradcheckTensor {
                name: t.name.clone(),
                numel: t.numel,
                max_rel_error: t.max_rel_error,
                max_abs_grad: t.max_abs_grad,
            })
            .collect(),
    }
}

pub fn cmd_gradcheck(a: &GradcheckArgs, log: Log) -> Result<Vec<GradcheckRun>> {
    let encoders: Vec<EncoderKind> =
        if a.encoder.eq_ignore_ascii_case("all") { EncoderKind::ALL.to_vec() } else { vec![a.encoder.parse()?] };
    let lambdas: Vec<LambdaMode> = if a.lambda.eq_ignore_ascii_case("all") {
        vec![LambdaMode::Manual { lambda: 0.9 }, LambdaMode::Automatic]
    } else {
        vec![serde_json::from_value(parse_lambda(&a.lambda)?).expect("lambda value")]
    };
    let cfg = GradCheckConfig { eps: a.eps, tolerance: a.tolerance, ..GradCheckConfig::default() };
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for &encoder in &encoders {
        for &lambda in &lambdas {
            let spec = ModelCheckSpec {
                encoder,
                lambda,
                model_dim: a.model_dim,
                heads: a.heads,
                utterances: a.utterances,
                classes: a.classes,
                seed: a.seed,
                constant_loss: a.constant_loss,
                ..ModelCheckSpec::default()
            };
            let report = check_model(&spec, cfg)?;
            let label = match lambda {
                LambdaMode::Manual { lambda } => format!("{encoder} lambda={lambda}"),
                LambdaMode::Automatic => format!("{encoder} lambda=auto"),
            };
            let zero = report.tensors.iter().all(|t| t.max_abs_grad == 0.0);
            println!(
                "{label:<22} tensors {:>3}  max rel error {:.3e}  {}{}",
                report.tensors.len(),
                report.max_rel_error(),
                if report.passed() { "ok" } else { "FAILED" },
                if zero { "  (all gradients zero)" } else { "" }
            );
            for t in report.failures() {
                println!("    {:<40} rel error {:.3e}", t.name, t.max_rel_error);
                failures.push(format!("{label}: {}", t.name));
            }
            runs.push(to_run(encoder, lambda, &report));
        }
    }
    if let Some(p) = &a.out {
        write_json(p, &runs)?;
    }
    log.say(format!("tolerance {:.1e}, eps {:.1e}", a.tolerance, a.eps));
    if failures.is_empty() {
        Ok(runs)
    } else {
        Err(Error::GradCheck(failures.join(", ")))
    }
}

pub fn cmd_synth(a: &SynthArgs, log: Log) -> Result<PathBuf> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    over!(seed, classes, train_dialogues, val_dialogues, test_dialogues, utterances, separation, noise, shift_rate);
    let corpus = synth_corpus(&spec)?;
    let manifest = write_corpus(&corpus, &a.out)?;
    write_json(&a.out.join("synth_spec.json"), &spec)?;
    log.say(format!("{}", corpus.summary()).trim_end());
    log.say(format!("wrote {}", manifest.display()));
    Ok(manifest)
}
