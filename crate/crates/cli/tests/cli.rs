use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn stg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = stg(args);
    assert!(
        out.status.success(),
        "stg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = stg(args);
    assert!(!out.status.success(), "stg {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

#[test]
fn pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = tiny_config();
    let cfg = cfg.to_str().unwrap();
    let common = ["--config", cfg, "--output-dir", out, "--workers", "1"];
    let with = |cmd: &str, extra: &[&str]| -> Vec<String> {
        let mut v = vec![cmd.to_string()];
        v.extend(common.iter().map(|s| s.to_string()));
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let run = |cmd: &str, extra: &[&str]| {
        let args = with(cmd, extra);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    assert!(run("pretrain", &[]).contains("base.ckpt"));
    assert_eq!(run("gen-data", &[]).lines().count(), 2);
    let train = run("train", &["--stop-after", "2"]);
    assert!(train.contains("seed 1: 2 updates"), "{train}");
    let train = run("train", &["--resume"]);
    assert!(train.contains("seed 2: 4 updates"), "{train}");

    let table = run("eval", &[]);
    assert!(table.contains("gain vs plm"), "{table}");
    let json: serde_json::Value = serde_json::from_str(&run("eval", &["--json"])).unwrap();
    assert_eq!(json["format"], "stg-report");
    assert_eq!(json["seeds"].as_array().unwrap().len(), 2);

    let curves = run("curves", &[]);
    assert!(Path::new(curves.trim()).exists());

    let sweep = run("sweep", &["--over", "c"]);
    for label in ["fixed-c-0", "fixed-c-0.5", "fixed-c-1", "stg"] {
        assert!(sweep.contains(label), "{sweep}");
    }
    assert!(dir.path().join("reports/sweep-c-n16.json").exists());

    let plm = run("eval", &["--method", "plm", "--json"]);
    let plm: serde_json::Value = serde_json::from_str(&plm).unwrap();
    let fixed: serde_json::Value =
        serde_json::from_str(&run("eval", &["--method", "fixed-c", "--c", "0", "--json"])).unwrap();
    assert_eq!(plm["mean"], fixed["mean"]);
    assert_eq!(plm["seeds"][0]["metrics"], fixed["seeds"][0]["metrics"]);
}

#[test]
fn score_command() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp.txt");
    let reference = dir.path().join("ref.txt");
    std::fs::write(&hyp, "a b c d\nx y\n").unwrap();
    std::fs::write(&reference, "a b c d\np q\n").unwrap();
    let out = ok(&[
        "score",
        "--hyp",
        hyp.to_str().unwrap(),
        "--ref",
        reference.to_str().unwrap(),
    ]);
    assert!(out.contains("rouge_l\t0.500000"), "{out}");
    assert!(out.contains("bleu\t"));
    std::fs::write(&reference, "a b c d\n").unwrap();
    let err = fails(&[
        "score",
        "--hyp",
        hyp.to_str().unwrap(),
        "--ref",
        reference.to_str().unwrap(),
    ]);
    assert!(err.contains("2 hypotheses but 1 references"), "{err}");
}

#[test]
fn errors_are_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = tiny_config();
    let cfg = cfg.to_str().unwrap();

    let e = fails(&["train", "--config", cfg, "--output-dir", out]);
    assert!(e.contains("run `stg pretrain` first"), "{e}");
    let e = fails(&["eval", "--config", "/no/such/config.toml"]);
    assert!(e.contains("/no/such/config.toml"), "{e}");
    let e = fails(&["eval", "--config", cfg, "--set", "seeds=[]"]);
    assert!(e.contains("seeds is empty"), "{e}");
    let e = fails(&["eval", "--config", cfg, "--method", "fixed-c"]);
    assert!(e.contains("fixed-c"), "{e}");
    let e = fails(&["eval", "--config", cfg, "--method", "nope"]);
    assert!(e.contains("unknown variant"), "{e}");
    let e = fails(&["eval", "--config", cfg, "--set", "train.bogus=1"]);
    assert!(e.contains("bogus"), "{e}");
    let e = fails(&["eval", "--config", cfg, "--set", "pretrain.dims.vocab=30"]);
    assert!(e.contains("vocabulary"), "{e}");
    let e = fails(&["eval", "--config", cfg, "--decode", "beam:0"]);
    assert!(e.contains("beam width"), "{e}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seeds = [1\n").unwrap();
    let e = fails(&["pretrain", "--config", bad.to_str().unwrap()]);
    assert!(e.contains("bad.toml"), "{e}");
}

#[test]
fn config_prints_resolved_values() {
    let text = ok(&[
        "config",
        "--seeds",
        "4,5",
        "--updates",
        "9",
        "--decode",
        "top-p:0.9:4",
    ]);
    assert!(text.contains("seeds = [4, 5]"), "{text}");
    assert!(text.contains("updates = 9"), "{text}");
    assert!(text.contains("strategy = \"top-p\""), "{text}");
}
