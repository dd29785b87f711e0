use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_simulstream"));
    c.env_remove("SIMULSTREAM_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap_or(serde_json::Value::Null)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn make_data(dir: &Path, regime: &str, count: usize) -> PathBuf {
    let out = dir.join(format!("data-{regime}"));
    ok(&["make-data", "--out", s(&out), "--count", &count.to_string(), "--regime", regime]);
    out
}

#[test]
fn no_lag_corpus_gets_no_silence() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_data(dir.path(), "none", 12);
    let planted = ok(&["align", "--data", s(&data), "--scorer", "planted"]);
    assert_eq!(planted["pairs"], 12);
    assert_eq!(planted["exact_match"], 1.0);
    assert_eq!(planted["inserted_silence_s"], 0.0);
    let table = ok(&["align", "--data", s(&data), "--out", s(&dir.path().join("a.jsonl"))]);
    assert_eq!(table["inserted_silence_s"], 0.0);
    assert!(dir.path().join("a.jsonl").exists());
}

#[test]
fn pipeline_leaves_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_data(dir.path(), "contextual", 10);
    let out = dir.path().join("p.jsonl");
    ok(&["align-pipeline", "--data", s(&data), "--scorer", "planted", "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 10);
    for line in text.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(row["violations_after"], 0, "{line}");
    }
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["make-data", "--out", s(&a), "--count", "8"]);
    ok(&["make-data", "--out", s(&b), "--count", "8"]);
    let fa = files(&a);
    let fb = files(&b);
    assert_eq!(fa.len(), fb.len());
    assert!(fa.len() > 8);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{} differs", x.display());
    }

    // the environment seed overrides the config and changes the data
    let c = dir.path().join("c");
    let out = bin().args(["make-data", "--out", s(&c), "--count", "8"]).env("SIMULSTREAM_SEED", "5").output().unwrap();
    assert!(out.status.success());
    assert_ne!(std::fs::read(a.join("ref.jsonl")).unwrap(), std::fs::read(c.join("ref.jsonl")).unwrap());
    let cfg = dir.path().join("seed5.json");
    std::fs::write(&cfg, r#"{"seed": 5}"#).unwrap();
    let d = dir.path().join("d");
    ok(&["--config", s(&cfg), "make-data", "--out", s(&d), "--count", "8"]);
    assert_eq!(std::fs::read(c.join("ref.jsonl")).unwrap(), std::fs::read(d.join("ref.jsonl")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"pipeline": {"min_lagg": 1.0}}"#).unwrap();
    let out = run(&["--config", s(&bad), "make-data", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("min_lagg"));

    let invalid = dir.path().join("invalid.json");
    std::fs::write(&invalid, r#"{"pipeline": {"window": 0}}"#).unwrap();
    assert_eq!(run(&["--config", s(&invalid), "bench"]).status.code(), Some(2));

    assert_eq!(run(&["align", "--data", s(&dir.path().join("missing"))]).status.code(), Some(3));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["bench", "--batch", "0"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let out = bin().args(["make-data", "--out", s(&dir.path().join("y"))]).env("SIMULSTREAM_SEED", "abc").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_translate_eval_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(
        &cfg,
        r#"{"train": {"model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "ffn_dim": 32, "d_depth": 8, "depth_ffn_dim": 16}}}"#,
    )
    .unwrap();
    let c = s(&cfg);
    let data = dir.path().join("data");
    ok(&["--config", c, "make-data", "--out", s(&data), "--count", "6"]);
    let model = dir.path().join("m.rqt");
    let trained = ok(&["--config", c, "train", "--data", s(&data), "--out", s(&model), "--steps", "4"]);
    assert_eq!(trained["steps"], 4);

    let hyp = dir.path().join("hyp.jsonl");
    let tr = ok(&["--config", c, "translate", "--model", s(&model), "--data", s(&data), "--out", s(&hyp), "--greedy"]);
    assert_eq!(tr["utterances"], 6);
    assert_eq!(std::fs::read_to_string(&hyp).unwrap().lines().count(), 6);

    // the references scored against themselves give BLEU 100
    let out = run(&[
        "eval",
        "--hyp",
        s(&data.join("ref.jsonl")),
        "--ref",
        s(&data.join("ref.jsonl")),
        "--timing",
        s(&data.join("timing.json")),
    ]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    let bleu_line = table.lines().find(|l| l.starts_with("BLEU")).unwrap();
    assert!(bleu_line.trim_end().ends_with("100.00"), "{table}");
    for metric in ["LAAL (s)", "End Offset (s)", "cosine similarity"] {
        assert!(table.contains(metric));
    }
    let out = run(&["eval", "--hyp", s(&hyp), "--ref", s(&data.join("ref.jsonl")), "--timing", s(&data.join("timing.json"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = dir.path().join("bench.csv");
    let out = run(&["--config", c, "bench", "--model", s(&model), "--batch", "1,2", "--frames", "6", "--out", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "batch,cfg,frames,wall_s,rtf,per_sequence_rtf");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,false,") && lines[4].starts_with("2,true,"));
}
