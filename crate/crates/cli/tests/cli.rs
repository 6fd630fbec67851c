use std::fs;
use std::path::Path;

use fdylka_cli::{dispatch, EXIT_DATA, EXIT_OK, EXIT_USAGE};

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("fdylka").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn evaluate_identical_files_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(run(&["synthgen", "--out", p(&data), "--clips", "4"]), EXIT_OK);
    let score = dir.path().join("score.json");
    let truth = data.join("ground_truth.tsv");
    let code = run(&["evaluate", "--ref", p(&truth), "--est", p(&truth), "--out", p(&score)]);
    assert_eq!(code, EXIT_OK);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&score).unwrap()).unwrap();
    assert_eq!(report["macro_f1"].as_f64(), Some(1.0));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    assert_eq!(run(&["evaluate", "--ref", "a.tsv"]), EXIT_USAGE);
    assert_eq!(run(&["synthgen"]), EXIT_USAGE);
    assert_eq!(run(&["train", "--stage", "3"]), EXIT_USAGE);
    assert_eq!(run(&["no-such-command"]), EXIT_USAGE);
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn stage_two_without_pseudo_labels_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(run(&["train", "--stage", "2", "--out", p(&out)]), EXIT_DATA);
    // the resolved config is still echoed for inspection
    assert!(out.join("stage2.resolved.json").exists());
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"trian": {}}"#).unwrap();
    let truth = dir.path().join("t.tsv");
    fs::write(&truth, "filename\tonset\toffset\tevent_label\n").unwrap();
    let code = run(&["evaluate", "--config", p(&cfg), "--ref", p(&truth), "--est", p(&truth)]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn evaluate_reports_unknown_labels_as_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("t.tsv");
    fs::write(&truth, "filename\tonset\toffset\tevent_label\na.wav\t0.0\t1.0\tKazoo\n").unwrap();
    assert_eq!(run(&["evaluate", "--ref", p(&truth), "--est", p(&truth)]), EXIT_DATA);
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(&["synthgen", "--out", p(&d.join("data")), "--clips", "6"]), EXIT_OK);
    let cfg = d.join("cfg.json");
    fs::write(
        &cfg,
        r#"{
  "classes": ["Alarm_bell_ringing", "Blender", "Dog"],
  "model": {"class_count": 3, "width_scale": 0.125, "rnn_hidden": 256, "embedding_dim": 768},
  "train": {"epochs": 1, "steps_per_epoch": 1},
  "paths": {
    "audio_dir": "data/audio", "feature_dir": "feat",
    "embeddings": {"kind": "stub", "seed": 3},
    "strong": ["data/strong.tsv"], "weak": ["data/weak.tsv"], "unlabeled": ["data/unlabeled.tsv"],
    "output_dir": "run"
  }
}"#,
    )
    .unwrap();
    let c = p(&cfg);
    assert_eq!(run(&["featurize", "--config", c, "--workers", "2"]), EXIT_OK);
    assert!(d.join("feat/stats.json").exists());
    assert_eq!(run(&["train", "--config", c, "--stage", "1"]), EXIT_OK);
    let ck = d.join("run/stage1_epoch1_teacher.flkc");
    assert!(ck.exists());
    let pl = d.join("pl.tsv");
    let unl = d.join("data/unlabeled.tsv");
    assert_eq!(
        run(&["pseudolabel", "--config", c, "--checkpoints", p(&ck), "--manifest", p(&unl), "--out", p(&pl)]),
        EXIT_OK
    );
    assert!(d.join("pl.tsv.provenance.tsv").exists());
    assert_eq!(
        run(&["train", "--config", c, "--stage", "2", "--pseudo-labels", p(&pl), "--out", p(&d.join("run2"))]),
        EXIT_OK
    );
    let strong = d.join("data/strong.tsv");
    let (a, b) = (d.join("a.jsonl"), d.join("b.jsonl"));
    for (probs, workers) in [(&a, "1"), (&b, "2")] {
        let code = run(&[
            "predict", "--config", c, "--checkpoints", p(&ck), "--manifest", p(&strong), "--out",
            p(&d.join("pred.tsv")), "--probs", p(probs), "--workers", workers,
        ]);
        assert_eq!(code, EXIT_OK);
    }
    // worker count must not change predictions
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let avg = d.join("avg.jsonl");
    let ev = d.join("avg.tsv");
    assert_eq!(
        run(&["ensemble", "--config", c, "--inputs", p(&a), p(&b), "--out", p(&avg), "--events", p(&ev)]),
        EXIT_OK
    );
    // averaging two identical files is the identity
    assert_eq!(fs::read(&a).unwrap(), fs::read(&avg).unwrap());
    assert_eq!(fs::read(d.join("pred.tsv")).unwrap(), fs::read(&ev).unwrap());
}
