use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "frame_size = 32\nnum_clips = 2\nnum_test_clips = 2\nframes_per_clip = 14\ninput_len = 3\npath_channels = [2, 2, 4]\nepochs = 1\nloss_width_divisor = 32\n";

fn vadkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vadkit")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = vadkit(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny(root: &Path) -> std::path::PathBuf {
    let path = root.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(vadkit(&["synth"]).status.code(), Some(2));
    assert_eq!(vadkit(&["train", "--out", "/tmp/x"]).status.code(), Some(2));
    assert_eq!(vadkit(&["bogus"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = vadkit(&["train", "--data", "/nonexistent/data", "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = vadkit(&["synth", "--config", s(&bad), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synthesis_is_reproducible_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(tree(&a), tree(&b));
    let listed: Vec<String> = serde_json::from_slice(&fs::read(a.join("outputs.json")).unwrap()).unwrap();
    assert!(listed.iter().any(|f| f == "manifest.json"));
}

#[test]
fn zero_noise_weight_is_logged_as_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--lambda-nt", "0"]);
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(line["noise_tolerance"], 0.0);
    assert_eq!(line["epoch"], 1);
}

#[test]
fn scoring_and_evaluation_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let p = |n: &str| dir.path().join(n);
    ok(&["synth", "--config", s(&cfg), "--out", s(&p("data"))]);
    ok(&["train", "--config", s(&cfg), "--data", s(&p("data")), "--out", s(&p("run"))]);
    let ckpt = p("run").join("final.ckpt");
    ok(&["score", "--config", s(&cfg), "--data", s(&p("data")), "--checkpoint", s(&ckpt), "--out", s(&p("sc")), "--q", "2"]);
    let csv = fs::read_to_string(p("sc").join("scores.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "clip_id,frame_index,psnr_db,score,label");
    assert_eq!(csv.lines().count(), 1 + 2 * (14 - 3));
    for run in ["ev1", "ev2"] {
        ok(&["eval", "--scores", s(&p("sc").join("scores.csv")), "--out", s(&p(run))]);
    }
    let a = fs::read(p("ev1").join("eval.json")).unwrap();
    assert_eq!(a, fs::read(p("ev2").join("eval.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(p("ev1").join("roc.csv").exists());
}
