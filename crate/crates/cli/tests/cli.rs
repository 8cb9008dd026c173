use std::path::Path;
use std::process::{Command, Output};

use slid_core::config::{Preset, RunConfig};

const TINY_RUN: &str = "[synth]\nsongs_per_language = 8\nsong_duration = 12.0\n[train]\nmax_epochs = 1\n";

fn slid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slid"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Failures print exactly one `error: ` line on stderr and exit nonzero.
fn fails(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    assert!(lines[0].starts_with("error: "), "stderr: {err}");
    lines[0].to_string()
}

#[test]
fn full_pipeline_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("c.toml"), TINY_RUN).unwrap();
    let base = ["--preset", "tiny", "--config", "c.toml", "--run-dir", "r", "--workers", "1"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        slid(d, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let out = ok(&run(&["synth"]));
    assert!(out.contains("24 songs"));
    let out = ok(&run(&["--manifest", "r/corpus/manifest.tsv", "prepare"]));
    assert!(out.lines().any(|l| l.starts_with("train\t")));
    assert!(d.join("r/charset.json").exists());

    ok(&run(&["--manifest", "r/corpus/manifest.tsv", "train", "--mode", "two_step"]));
    for f in ["checkpoint.slid", "train.log", "config.toml", "summary.json"] {
        assert!(d.join("r").join(f).exists(), "missing {f}");
    }
    // The echoed config is complete and valid on its own.
    let echoed = RunConfig::load(&d.join("r/config.toml"), Preset::Standard).unwrap();
    assert_eq!(echoed.acoustic.lstm_hidden, 16);
    assert_eq!(echoed.train.max_epochs, 1);
    assert!(std::fs::read_to_string(d.join("r/train.log")).unwrap().contains("phase=acoustic"));

    let table = ok(&slid(d, &["--run-dir", "r", "evaluate"]));
    assert!(table.contains("balanced accuracy"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r/report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "two_step");
    let bacc = report["balanced_accuracy"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&bacc));

    let preds = ok(&slid(d, &["--run-dir", "r", "predict"]));
    let lines: Vec<&str> = preds.lines().collect();
    assert_eq!(lines.len(), 24);
    for l in lines {
        let cols: Vec<&str> = l.split('\t').collect();
        assert_eq!(cols.len(), 3);
        assert!(["alpha", "beta", "gamma", "instrumental"].contains(&cols[1]));
        cols[2].parse::<f64>().unwrap();
    }
}

#[test]
fn errors_are_single_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let e = fails(&slid(d, &["train", "--mode", "bogus"]));
    assert!(e.contains("bogus"));
    let e = fails(&slid(d, &["train"]));
    assert!(e.contains("manifest"));
    fails(&slid(d, &["--scenario", "half-open", "synth"]));
    fails(&slid(d, &["--preset", "huge", "synth"]));
    fails(&slid(d, &["--no-such-flag", "synth"]));
    fails(&slid(d, &["evaluate"]));

    std::fs::write(d.join("bad.toml"), "[train]\nlearning_rate = 1.0\n").unwrap();
    let e = fails(&slid(d, &["--config", "bad.toml", "synth"]));
    assert!(e.contains("learning_rate"));
    std::fs::write(d.join("bad.toml"), "[split]\ntrain = 0.95\n").unwrap();
    fails(&slid(d, &["--config", "bad.toml", "synth"]));
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&slid(tmp.path(), &["selftest", "--instances", "20"]));
    assert!(out.lines().count() >= 10);
    assert!(out.lines().all(|l| l.starts_with("PASS\t")), "{out}");
}
