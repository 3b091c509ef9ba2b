use std::path::Path;
use std::process::{Command, Output};

use gebc::datamodel::{load_annotations, CaptionKind};
use gebc::metrics::{predictions_to_json, Prediction};

const SMALL_MODEL: &str = "[model]
hidden_dim = 16
ffn_dim = 32
encoder_layers = 1
frame_decoder_layers = 1
region_decoder_layers = 1
attention_heads = 2
sampling_points = 2
target_length = 12
max_regions = 4
max_caption_len = 8
strides = [1, 2]
";

fn gebc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gebc"))
        .args(args)
        .current_dir(dir)
        .env_remove("GEBC_NUM_WORKERS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn dataset(dir: &Path) {
    std::fs::write(dir.join("spec.toml"), "seed = 1\nnum_videos = 4\n").unwrap();
    let o = gebc(dir, &["generate", "--spec", "spec.toml", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn train_small(dir: &Path, kind: &str, epochs: usize) -> Output {
    std::fs::write(
        dir.join("run.toml"),
        format!("{SMALL_MODEL}\n[train]\ninitial_lr = 1e-3\nbatch_size = 2\nnum_epochs = {epochs}\n"),
    )
    .unwrap();
    gebc(dir, &["train", "--data", "data", "--kind", kind, "--config", "run.toml", "--out", "run"])
}

#[test]
fn generate_writes_dataset_and_refuses_non_empty_out() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    let records = load_annotations(&tmp.path().join("data/annotations.json")).unwrap();
    assert_eq!(records.len(), 4);
    for r in &records {
        assert!(tmp.path().join(format!("data/features/{}.safetensors", r.video_id)).exists());
    }
    let again = gebc(tmp.path(), &["generate", "--spec", "spec.toml", "--out", "data"]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"));
    let forced = gebc(tmp.path(), &["generate", "--spec", "spec.toml", "--out", "data", "--force"]);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
}

#[test]
fn generate_missing_spec_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gebc(tmp.path(), &["generate", "--spec", "nope.toml", "--out", "data"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.toml"));
    assert!(!tmp.path().join("data").exists());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&gebc(tmp.path(), &["train", "--bogus"])), 1);
    assert_eq!(code(&gebc(tmp.path(), &[])), 1);
    let o = gebc(tmp.path(), &["train", "--data", "d", "--kind", "middle", "--out", "o"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn help_documents_flags() {
    let tmp = tempfile::tempdir().unwrap();
    for (cmd, flags) in [
        ("generate", &["--spec", "--out", "--force", "--seed"][..]),
        ("train", &["--data", "--kind", "--config", "--out", "--seed"][..]),
        ("predict", &["--ckpt", "--data", "--kind", "--out"][..]),
        ("evaluate", &["--pred", "--ann", "--kind", "--percent", "--report"][..]),
    ] {
        let o = gebc(tmp.path(), &[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn config_errors_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    std::fs::write(tmp.path().join("bad.toml"), "[train]\nlearning_rate = 1e-3\n").unwrap();
    let o = gebc(tmp.path(), &["train", "--data", "data", "--kind", "subject", "--config", "bad.toml", "--out", "r"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    std::fs::write(tmp.path().join("bad.toml"), "[train]\nbatch_size = \"eight\"\n").unwrap();
    let o = gebc(tmp.path(), &["train", "--data", "data", "--kind", "subject", "--config", "bad.toml", "--out", "r"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    std::fs::write(tmp.path().join("bad.toml"), "[train]\ndecay_factor = 2.0\n").unwrap();
    let o = gebc(tmp.path(), &["train", "--data", "data", "--kind", "subject", "--config", "bad.toml", "--out", "r"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.decay_factor"), "{}", stderr(&o));
}

#[test]
fn invalid_worker_count_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    let o = Command::new(env!("CARGO_BIN_EXE_gebc"))
        .args(["train", "--data", "data", "--kind", "subject", "--out", "r"])
        .current_dir(tmp.path())
        .env("GEBC_NUM_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("GEBC_NUM_WORKERS"));
}

#[test]
fn default_config_echo_shows_learning_rate() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    // A missing dataset stops the run right after the echo.
    let o = gebc(tmp.path(), &["train", "--data", "missing", "--kind", "subject", "--out", "r"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("lr 5e-5"), "{err}");
    assert!(err.contains("initial_lr = 0.00005"), "{err}");
    assert!(err.contains("hidden_dim = 512"), "{err}");
}

#[test]
fn corrupt_feature_file_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    let victim = tmp.path().join("data/features/syn_0002.safetensors");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let o = train_small(tmp.path(), "subject", 1);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("syn_0002.safetensors"), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    std::fs::write(
        tmp.path().join("run.toml"),
        format!("{SMALL_MODEL}\n[train]\ninitial_lr = 1e250\nbatch_size = 2\nnum_epochs = 3\n"),
    )
    .unwrap();
    let o = gebc(tmp.path(), &["train", "--data", "data", "--kind", "subject", "--config", "run.toml", "--out", "run"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn train_predict_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    let o = train_small(dir, "subject", 2);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let names: Vec<String> = std::fs::read_dir(dir.join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    for f in ["subject_epoch0.ckpt", "subject_epoch1.ckpt", "train.log", "epochs.jsonl", "vocab.txt", "config.toml"] {
        assert!(names.iter().any(|n| n == f), "{f} missing from {names:?}");
    }
    assert!(!names.iter().any(|n| n.starts_with("before") || n.starts_with("after")));

    let o = gebc(dir, &["predict", "--ckpt", "run/subject_epoch1.ckpt", "--data", "data", "--kind", "subject", "--out", "pred.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records = load_annotations(&dir.join("data/annotations.json")).unwrap();
    let total: usize = records.iter().map(|r| r.num_boundaries()).sum();
    let preds = gebc::metrics::load_predictions(&dir.join("pred.json")).unwrap();
    assert_eq!(preds.len(), total);
    assert!(preds.iter().all(|p| p.kind == CaptionKind::Subject));

    let o = gebc(dir, &["predict", "--ckpt", "run/subject_epoch1.ckpt", "--data", "data", "--kind", "after", "--out", "x.json"]);
    assert_eq!(code(&o), 1);
    assert!(!dir.join("x.json").exists());

    let o = gebc(dir, &["evaluate", "--pred", "pred.json", "--ann", "data/annotations.json", "--kind", "subject"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("CIDEr"));
    assert!(dir.join("pred.scores.json").exists());
}

#[test]
fn predict_rejects_mismatched_vocabulary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    assert_eq!(code(&train_small(dir, "subject", 1)), 0);
    std::fs::write(dir.join("run/vocab.txt"), "zebra\n").unwrap();
    let o = gebc(dir, &["predict", "--ckpt", "run/subject_epoch0.ckpt", "--data", "data", "--kind", "subject", "--out", "p.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("vocabulary"), "{}", stderr(&o));
}

#[test]
fn evaluate_perfect_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    let records = load_annotations(&dir.join("data/annotations.json")).unwrap();
    let mut preds = Vec::new();
    for r in &records {
        for (i, c) in r.captions.iter().enumerate() {
            for kind in CaptionKind::ALL {
                preds.push(Prediction {
                    video_id: r.video_id.clone(),
                    boundary_index: i,
                    kind,
                    caption: c.get(kind).to_string(),
                });
            }
        }
    }
    std::fs::write(dir.join("perfect.json"), predictions_to_json(&preds)).unwrap();
    let o = gebc(dir, &["evaluate", "--pred", "perfect.json", "--ann", "data/annotations.json", "--percent", "--report", "r.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["average"]["rouge_l"].as_f64(), Some(100.0));
    let o = gebc(dir, &["evaluate", "--pred", "perfect.json", "--ann", "data/annotations.json"]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("perfect.scores.json")).unwrap()).unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(report["average"]["rouge_l"].as_f64(), Some(1.0));

    preds.remove(3);
    std::fs::write(dir.join("partial.json"), predictions_to_json(&preds)).unwrap();
    let o = gebc(dir, &["evaluate", "--pred", "partial.json", "--ann", "data/annotations.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing"), "{}", stderr(&o));

    std::fs::write(dir.join("empty.json"), "[]").unwrap();
    let o = gebc(dir, &["evaluate", "--pred", "empty.json", "--ann", "data/annotations.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("empty"));
}
