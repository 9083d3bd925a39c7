use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn flrml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flrml"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("report is JSON")
}

/// Three well separated clusters in 6 dimensions, the class signal in the
/// first two coordinates.
fn write_blobs(path: &Path, per_class: usize, seed: u64) {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    };
    let centers = [(3.0, 0.0), (-1.5, 2.6), (-1.5, -2.6)];
    let mut text = String::from("label,f0,f1,f2,f3,f4,f5\n");
    for i in 0..per_class * 3 {
        let c = i % 3;
        let (cx, cy) = centers[c];
        let mut row = vec![c.to_string(), format!("{}", cx + next()), format!("{}", cy + next())];
        for _ in 0..4 {
            row.push(format!("{}", 2.0 * next()));
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    train: PathBuf,
    test: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let train = root.join("train.csv");
    let test = root.join("test.csv");
    write_blobs(&train, 40, 1);
    write_blobs(&test, 20, 2);
    Fixture {
        _dir: dir,
        root,
        train,
        test,
    }
}

#[test]
fn gen_triplets_writes_the_requested_count() {
    let fx = fixture();
    let out = fx.root.join("t.csv");
    let report = stdout_json(&flrml(&[
        "gen-triplets",
        "--train",
        s(&fx.train),
        "--out",
        s(&out),
        "--triplets-per-sample",
        "3",
    ]));
    assert_eq!(report["triplets"], 360);
    assert_eq!(report["config"]["triplets_per_sample"], 3);
    assert!(out.exists());
}

#[test]
fn train_transform_evaluate_round_trip() {
    let fx = fixture();
    let model = fx.root.join("m.bin");
    let trace = fx.root.join("trace.csv");
    let report = stdout_json(&flrml(&[
        "train",
        "--train",
        s(&fx.train),
        "--test",
        s(&fx.test),
        "--model-out",
        s(&model),
        "--trace-out",
        s(&trace),
        "--rank",
        "2",
    ]));
    assert_eq!(report["mode"], "flrml");
    assert_eq!(report["rank"], 2);
    assert!(report["accuracy"].as_f64().unwrap() >= 0.9, "{report}");
    assert!(report["svd_seconds"].is_number() && report["optimize_seconds"].is_number());
    assert_eq!(report["config"]["rank"], 2);
    assert!(fs::read_to_string(&trace).unwrap().starts_with("iter,f,gnorm,tau,seconds\n"));

    let emb = fx.root.join("y.csv");
    stdout_json(&flrml(&["transform", "--model", s(&model), "--input", s(&fx.test), "--out", s(&emb)]));
    let text = fs::read_to_string(&emb).unwrap();
    assert!(text.starts_with("label,y0,y1\n"));
    assert_eq!(text.lines().count(), 61);

    let report_path = fx.root.join("eval.json");
    let out = flrml(&[
        "evaluate",
        "--model",
        s(&model),
        "--train",
        s(&fx.train),
        "--test",
        s(&fx.test),
        "--k",
        "3",
        "--report-out",
        s(&report_path),
    ]);
    assert!(out.status.success());
    let eval: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(eval["k"], 3);
    assert_eq!(eval["n_test"], 60);
    assert!(eval["accuracy"].as_f64().unwrap() >= 0.9);
}

#[test]
fn minibatch_mode_trains() {
    let fx = fixture();
    let model = fx.root.join("m.bin");
    let conf = fx.root.join("run.conf");
    fs::write(&conf, "mode = mflrml\nrank = 2\nnum_batches = 5\nbatch_triplets = 30\n").unwrap();
    let report = stdout_json(&flrml(&[
        "train",
        "--config",
        s(&conf),
        "--train",
        s(&fx.train),
        "--model-out",
        s(&model),
    ]));
    assert_eq!(report["mode"], "mflrml");
    assert_eq!(report["iterations"], 5);
    assert!(model.exists());
}

#[test]
fn identical_runs_write_identical_models() {
    let fx = fixture();
    let a = fx.root.join("a.bin");
    let b = fx.root.join("b.bin");
    for path in [&a, &b] {
        stdout_json(&flrml(&["train", "--train", s(&fx.train), "--model-out", s(path), "--rank", "3", "--seed", "9"]));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn missing_input_exits_2_without_output() {
    let fx = fixture();
    let model = fx.root.join("m.bin");
    let out = flrml(&["train", "--train", s(&fx.root.join("nope.csv")), "--model-out", s(&model)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!model.exists());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "UsageError");

    let out = flrml(&["train", "--train", s(&fx.train)]);
    assert_eq!(out.status.code(), Some(2));
    let out = flrml(&["train", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_input_exits_1_with_json_error() {
    let fx = fixture();
    let bad = fx.root.join("bad.csv");
    fs::write(&bad, "label,f0\n1,abc\n").unwrap();
    let model = fx.root.join("m.bin");
    let out = flrml(&["train", "--train", s(&bad), "--model-out", s(&model)]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "ParseError");
    assert!(err["message"].as_str().unwrap().contains("bad.csv"));
    assert!(!model.exists());
}
