use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stilt-bench")).args(args).output().unwrap()
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().expect("stderr line")).expect("json error line")
}

const SPEC: &str = r#"
seed = 5
dimension = 4
images = [3, 3, 3]
texts = [2, 2, 2]
image_signal = 1.0
text_signal = 1.0
noise_scale = 0.5
domain_shift = 0.0

[memes]
train = [6, 6, 6]
val = [2, 2, 2]
test = [3, 3, 3]
"#;

fn gen(spec: &Path, out: &Path) -> Output {
    bench(&["gen", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

#[test]
fn gen_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = gen(&spec, dir);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(v["records"], 48);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn bad_spec_fails_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(&spec, SPEC.replace("dimension = 4", "dimension = 0")).unwrap();
    let out = gen(&spec, &tmp.path().join("o"));
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out)["error"].is_string());
}

#[test]
fn report_on_empty_dir_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bench(&["report", "--dir", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out)["kind"].is_string());
}

#[test]
fn usage_errors_are_json() {
    let out = bench(&["run"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["kind"], "usage");
    let out = bench(&["gradcheck", "--models", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["kind"], "usage");
}

#[test]
fn gradcheck_passes() {
    let out = bench(&["gradcheck", "--models", "2", "--seed", "11"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-6);
}
