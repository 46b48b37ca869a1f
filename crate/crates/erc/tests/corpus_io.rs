use std::fs;
use std::path::Path;

use erc::corpus_io::{load_corpus, read_manifest, write_corpus, MANIFEST_FILE};
use erc_core::data::{shift_labels, Conversation, Corpus, FeatureDims, Split, Utterance};
use erc_core::synth::{synth_corpus, SynthSpec};

fn dims() -> FeatureDims {
    FeatureDims { text: 3, visual: 2, audio: 1 }
}

fn utterance(label: usize, seed: f32) -> Utterance {
    Utterance {
        speaker: "A".into(),
        label,
        text: vec![seed, -seed, 0.5],
        visual: vec![seed * 2.0, 1.0],
        audio: vec![f32::MIN_POSITIVE * seed],
    }
}

/// Splits `utterances` over `dialogues` conversations as evenly as possible.
fn split(prefix: &str, dialogues: usize, utterances: usize, classes: usize) -> Vec<Conversation> {
    (0..dialogues)
        .map(|d| {
            let n = utterances / dialogues + usize::from(d < utterances % dialogues);
            Conversation {
                id: format!("{prefix}{d}"),
                utterances: (0..n).map(|i| utterance((d + i) % classes, (d * 31 + i) as f32 * 0.01)).collect(),
            }
        })
        .collect()
}

fn meld_shaped() -> Corpus {
    Corpus {
        name: "meld-shaped".into(),
        emotions: ["neutral", "surprise", "fear", "sadness", "joy", "disgust", "anger"].map(String::from).to_vec(),
        dims: dims(),
        train: split("tr", 1039, 9989, 7),
        val: split("va", 114, 1109, 7),
        test: split("te", 280, 2610, 7),
    }
}

#[test]
fn meld_shaped_corpus_round_trips_with_counts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = meld_shaped();
    let manifest = write_corpus(&corpus, dir.path()).unwrap();
    let m = read_manifest(&manifest).unwrap();
    let c = &m.counts[&Split::Train];
    assert_eq!((c.dialogues, c.utterances), (1039, 9989));
    assert_eq!((m.counts[&Split::Val].dialogues, m.counts[&Split::Val].utterances), (114, 1109));
    assert_eq!((m.counts[&Split::Test].dialogues, m.counts[&Split::Test].utterances), (280, 2610));
    let back = load_corpus(&manifest).unwrap();
    assert_eq!(back, corpus);
    let s = back.summary();
    assert_eq!((s.train.dialogues, s.train.utterances), (1039, 9989));
    assert_eq!((s.val.dialogues, s.val.utterances), (114, 1109));
    assert_eq!((s.test.dialogues, s.test.utterances), (280, 2610));
}

fn write_small(dir: &Path) -> std::path::PathBuf {
    let corpus = Corpus {
        name: "small".into(),
        emotions: vec!["a".into(), "b".into()],
        dims: dims(),
        train: split("tr", 2, 5, 2),
        val: split("va", 1, 2, 2),
        test: split("te", 1, 3, 2),
    };
    write_corpus(&corpus, dir).unwrap()
}

fn edit_line(path: &Path, line: usize, f: impl Fn(&mut serde_json::Value)) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[line]).unwrap();
    f(&mut v);
    lines[line] = serde_json::to_string(&v).unwrap();
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn missing_modality_error_names_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_small(dir.path());
    edit_line(&dir.path().join("train.jsonl"), 1, |v| {
        v["utterances"][1].as_object_mut().unwrap().remove("audio");
    });
    let err = load_corpus(&manifest).unwrap_err().to_string();
    assert!(err.contains("train"), "{err}");
    assert!(err.contains("tr1"), "{err}");
    assert!(err.contains("utterance 1"), "{err}");
    assert!(err.contains("audio"), "{err}");
}

#[test]
fn unknown_label_and_wrong_width_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_small(dir.path());
    edit_line(&dir.path().join("val.jsonl"), 0, |v| v["utterances"][0]["label"] = "zzz".into());
    let err = load_corpus(&manifest).unwrap_err().to_string();
    assert!(err.contains("zzz") && err.contains("val"), "{err}");

    let manifest = write_small(dir.path());
    edit_line(&dir.path().join("test.jsonl"), 0, |v| {
        v["utterances"][2]["text"] = erc::corpus_io::encode_features(&[1.0]).into()
    });
    let err = load_corpus(&manifest).unwrap_err().to_string();
    assert!(err.contains("test") && err.contains("utterance 2") && err.contains("text"), "{err}");
}

#[test]
fn declared_counts_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_small(dir.path());
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    m["counts"]["train"]["utterances"] = 6.into();
    fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    let err = load_corpus(&manifest).unwrap_err().to_string();
    assert!(err.contains("train"), "{err}");
}

#[test]
fn empty_split_and_missing_file_fail() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_small(dir.path());
    fs::write(dir.path().join("val.jsonl"), "").unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    m.as_object_mut().unwrap().remove("counts");
    fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    let err = load_corpus(&manifest).unwrap_err().to_string();
    assert!(err.contains("val") && err.contains("zero conversations"), "{err}");

    let err = load_corpus(&dir.path().join("nope").join(MANIFEST_FILE)).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn synthetic_corpus_round_trips_with_shift_structure() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { shift_rate: 0.0, ..SynthSpec::default() };
    let corpus = synth_corpus(&spec).unwrap();
    let back = load_corpus(&write_corpus(&corpus, dir.path()).unwrap()).unwrap();
    assert_eq!(back, corpus);
    for s in Split::ALL {
        for c in back.split(s) {
            assert!(shift_labels(&c.labels()).as_slice().iter().all(|&x| x == 0));
        }
    }
}
