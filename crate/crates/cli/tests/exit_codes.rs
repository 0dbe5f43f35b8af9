use std::path::Path;
use std::process::{Command, Output};

fn siamfv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siamfv")).current_dir(dir).args(args).output().unwrap()
}

fn error_kind(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    let line = text.lines().find(|l| l.starts_with('{')).expect("JSON error line");
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    v["error"].as_str().unwrap_or_default().to_string()
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(siamfv(dir.path(), &["train"]).status.code(), Some(2));
    assert_eq!(siamfv(dir.path(), &["project", "--vectors", "v.json", "--out", "o"]).status.code(), Some(2));
    let bad_dim = ["project", "--fit", "pca", "--dim", "100", "--vectors", "v.json", "--out", "o"];
    assert_eq!(siamfv(dir.path(), &bad_dim).status.code(), Some(2));
    assert_eq!(siamfv(dir.path(), &["--threads", "0", "gradcheck", "--clusters", "1", "--dim", "1", "--count", "1"]).status.code(), Some(2));
}

#[test]
fn missing_input_exits_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = siamfv(dir.path(), &["init-gmm", "--manifest", "nope.json", "--out", "g.fvg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!error_kind(&out).is_empty());
}

#[test]
fn projection_on_its_own_dataset_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = siamfv(dir.path(), args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stdout));
    };
    run(&["synth", "--classes", "130", "--items-per-class", "2", "--descriptors-per-item", "4", "--dim", "16", "--eval-classes", "0", "--out", "d"]);
    run(&["init-gmm", "--manifest", "d/manifest.json", "--clusters", "8", "--out", "g.fvg"]);
    run(&["encode", "--manifest", "d/manifest.json", "--gmm", "g.fvg", "--dataset-tag", "same", "--out", "v"]);
    run(&["project", "--fit", "pca", "--dim", "128", "--vectors", "v/vectors.json", "--out", "p.fvp"]);
    let out = siamfv(dir.path(), &["project", "--apply", "p.fvp", "--vectors", "v/vectors.json", "--out", "w"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "protocol_violation");
}

#[test]
fn gradcheck_reports_success() {
    let dir = tempfile::tempdir().unwrap();
    let out = siamfv(dir.path(), &["gradcheck", "--clusters", "2", "--dim", "3", "--count", "5", "--seed", "1"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let last: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert!(last["max_rel_error"].as_f64().unwrap() <= 1e-6);
}
