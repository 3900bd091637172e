use std::path::Path;
use std::process::{Command, Output};

fn actsum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actsum"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = actsum(args);
    assert!(
        out.status.success(),
        "actsum {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_corpus(dir: &Path, seed: &str) {
    ok(&[
        "gen-synthetic", "--out", s(dir), "--videos", "5", "--min-frames", "40", "--max-frames", "60", "--dim", "8",
        "--seed", seed,
    ]);
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_corpus(&data, "3");
    let ckpt = tmp.path().join("model.avsc");
    let history = tmp.path().join("history.json");
    let out = ok(&[
        "train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "2", "--hidden", "6", "--history", s(&history),
        "--seed", "3",
    ]);
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("resolved config:") && log.contains("seed: 3"), "{log}");
    assert!(log.contains("epoch   1"), "{log}");
    assert!(ckpt.exists() && history.exists());

    let feats = data.join("video_000.avsf");
    let ann = data.join("video_000.json");
    let summary = tmp.path().join("summary.json");
    ok(&[
        "summarize", "--checkpoint", s(&ckpt), "--features", s(&feats), "--annotations", s(&ann), "--out", s(&summary),
    ]);
    let record: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert!(record["selected"].is_array());

    let out = ok(&["evaluate", "--summary", s(&summary), "--annotations", s(&ann), "--mode", "max"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let f1 = report["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    let out = ok(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "val"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["per_video"].as_array().unwrap().len(), 1);

    let out = ok(&["analyze", "--data", s(&data), "--checkpoint", s(&ckpt)]);
    let tables = String::from_utf8(out.stdout).unwrap();
    assert!(tables.contains("video\tscale0\tscale1\tscale2\tscale3\toverall"));
    assert!(tables.contains("\nmodel_summaries\t"));
    assert!(tables.contains("\nvideos\t"));
}

#[test]
fn segment_and_oracle_emit_json() {
    let tmp = tempfile::tempdir().unwrap();
    small_corpus(tmp.path(), "1");
    let out = ok(&["segment", "--features", s(&tmp.path().join("video_001.avsf")), "--penalty", "0.01"]);
    let shots: Vec<(usize, usize)> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(shots[0].0, 0);
    assert!(shots.windows(2).all(|w| w[0].1 == w[1].0));

    let out = ok(&["oracle", "--annotations", s(&tmp.path().join("video_001.json"))]);
    let labels: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(labels["summary_mask"].as_array().unwrap().len(), shots.last().unwrap().1);
}

#[test]
fn identical_flags_give_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_corpus(&a, "7");
    small_corpus(&b, "7");
    for name in ["index.json", "video_002.avsf", "video_002.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
    let args = |d: &Path| {
        let c = d.join("m.avsc");
        ok(&["train", "--data", s(d), "--out", s(&c), "--epochs", "1", "--hidden", "4"]);
        std::fs::read(c).unwrap()
    };
    assert_eq!(args(&a), args(&b));
}

#[test]
fn config_file_and_flags_resolve() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(&cfg, "[train]\nlambda = 0.5\nbudget = 0.2\n\n[synthetic]\ndim = 4\n").unwrap();
    let data = tmp.path().join("d");
    let out = ok(&[
        "--config", s(&cfg), "gen-synthetic", "--out", s(&data), "--videos", "2", "--min-frames", "40", "--max-frames", "40",
        "--budget", "0.3",
    ]);
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("\"lambda\":0.5"), "{log}");
    assert!(log.contains("\"budget\":0.3"), "{log}");
    assert!(log.contains("\"dim\":4"), "{log}");

    std::fs::write(&cfg, "[train]\nlamda = 0.5\n").unwrap();
    let out = actsum(&["--config", s(&cfg), "gen-synthetic", "--out", s(&data)]);
    assert!(!out.status.success());
}

#[test]
fn errors_exit_nonzero_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.avsf");
    std::fs::write(&bad, b"NOPE0000000000000000").unwrap();
    let out = actsum(&["segment", "--features", s(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));

    let out = actsum(&["oracle", "--annotations", s(&tmp.path().join("missing.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let out = actsum(&["gen-synthetic", "--out", s(tmp.path()), "--dim", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dim"));

    let out = actsum(&["evaluate"]);
    assert!(!out.status.success());
}
