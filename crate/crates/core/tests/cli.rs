use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[model]
enc_dim = 8
enc_depth = 1
dec_dim = 8
dec_depth = 1

[pretrain]
epochs = 1
steps_per_epoch = 3

[distill]
epochs = 1
steps_per_epoch = 3

[finetune]
epochs = 4

[synthetic]
n_subjects = 3
duration_s = 400.0

[preprocess.window]
stride_samples = 640
";

fn pulse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pulse")).args(args).output().expect("spawn pulse")
}

fn ok(args: &[&str]) -> String {
    let o = pulse(args);
    assert!(
        o.status.success(),
        "pulse {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn metric_rows(csv: &str) -> Vec<String> {
    csv.lines()
        .skip(1)
        .filter(|l| !l.contains(",summary,"))
        .map(|l| l.split_once(',').unwrap().1.to_string())
        .collect()
}

#[test]
fn unknown_preset_exits_2_naming_valid_presets() {
    let o = pulse(&["run", "--preset", "F", "--synthetic"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("A, B, C, D, E"), "{err}");
}

#[test]
fn config_errors_exit_2_runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[pretrain]\nepoch = 3\n").unwrap();
    let o = pulse(&["run", "--preset", "A", "--synthetic", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("metrics.csv").exists());

    let o = pulse(&["run", "--preset", "A", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "no data source is a usage error");

    let missing = dir.path().join("nothing-here");
    let o = pulse(&["run", "--preset", "A", "--folds", s(&missing), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stage_commands_reproduce_preset_c() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let (data, folds) = (d.join("data"), d.join("folds"));
    ok(&["synth", "--subjects", "3", "--duration-s", "400", "--seed", "5", "--out", s(&data)]);
    let summary = ok(&["preprocess", "--in", s(&data), "--out", s(&folds), "--stride-s", "10"]);
    assert!(summary.contains("total"));
    assert!(folds.join("fold_03.pfold").exists());

    let common = ["--config", s(&cfg), "--folds", s(&folds), "--seed", "4"];
    let with = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = extra.iter().map(|x| x.to_string()).collect();
        v.extend(common.iter().map(|x| x.to_string()));
        v
    };
    let run = |args: Vec<String>| ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    run(with(&["pretrain", "--out", s(&d.join("cheap"))]));
    run(with(&["pretrain", "--eda", "--out", s(&d.join("eda"))]));
    assert!(d.join("cheap/fold_01/BVP.ckpt").exists() && d.join("eda/fold_01/EDA.ckpt").exists());
    let distilled = run(with(&[
        "distill",
        "--teacher",
        s(&d.join("eda")),
        "--students",
        s(&d.join("cheap")),
        "--out",
        s(&d.join("kd")),
    ]));
    assert!(distilled.contains("cos"));
    assert!(d.join("kd/fold_02/heads.pheads").exists());
    run(with(&["finetune", "--encoders", s(&d.join("kd")), "--out", s(&d.join("ft"))]));
    run(with(&["run", "--preset", "C", "--out", s(&d.join("c"))]));

    let staged = std::fs::read_to_string(d.join("ft/metrics.csv")).unwrap();
    let preset = std::fs::read_to_string(d.join("c/metrics.csv")).unwrap();
    assert_eq!(metric_rows(&staged), metric_rows(&preset));
    for sub in ["cheap", "eda", "kd", "ft", "c"] {
        assert!(d.join(sub).join("manifest.json").exists(), "{sub} manifest");
    }
    let hist = std::fs::read_to_string(d.join("c/C/seed4/fold_01/distill.csv")).unwrap();
    assert!(hist.starts_with("epoch,loss_total,loss_align,loss_rec,loss_hid,loss_emb,loss_perp,val_auprc,val_acc"));

    let diag = ok(&["diagnose", "--encoders", s(&d.join("kd")), "--folds", s(&folds), "--fold", "1"]);
    assert_eq!(diag.lines().count(), 1 + 4);
    assert!(diag.lines().nth(1).unwrap().starts_with("1,ECG,"));
}

#[test]
fn run_is_deterministic_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let go = |out: &str| {
        let o = dir.path().join(out);
        ok(&["run", "--preset", "A,C", "--synthetic", "--config", s(&cfg), "--seed", "7", "--out", s(&o)]);
        o
    };
    let (a, b) = (go("a"), go("b"));
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.csv")).unwrap());
    let text = String::from_utf8(ma).unwrap();
    assert_eq!(metric_rows(&text).len(), 2 * 3);
    for p in ["manifest.json", "metrics.txt", "config.toml", "C/seed7/fold_01/heads.pheads", "A/seed7/fold_02/scores.csv"] {
        assert!(a.join(p).exists(), "{p}");
    }
    let man: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(man["seeds"], serde_json::json!([7]));
    assert!(man["checkpoints"]["C/seed7"].as_array().unwrap().len() >= 3 * 5);
}

#[test]
fn eval_emits_one_csv_row() {
    let dir = tempfile::tempdir().unwrap();
    let (sc, lb) = (dir.path().join("s.txt"), dir.path().join("l.txt"));
    std::fs::write(&sc, "0.1\n0.4\n0.35\n0.8\n").unwrap();
    std::fs::write(&lb, "0\n0\n1\n1\n").unwrap();
    let out = ok(&["eval", "--scores", s(&sc), "--labels", s(&lb)]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("auroc,auprc,accuracy,threshold"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((row[0] - 0.75).abs() < 1e-9 && (row[2] - 0.75).abs() < 1e-9);

    std::fs::write(&sc, "0.8,0.1,0.1\n0.2,0.7,0.1\n0.1,0.2,0.7\n").unwrap();
    std::fs::write(&lb, "0\n1\n2\n").unwrap();
    let out = ok(&["eval", "--scores", s(&sc), "--labels", s(&lb), "--multiclass"]);
    assert!(out.lines().nth(1).unwrap().starts_with("1.0000000000,1.0000000000,1.0000000000"));

    std::fs::write(&lb, "0\n1\n").unwrap();
    assert_eq!(pulse(&["eval", "--scores", s(&sc), "--labels", s(&lb), "--multiclass"]).status.code(), Some(1));
}
