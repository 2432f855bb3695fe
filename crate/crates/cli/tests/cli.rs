use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_shadow-da");

const SMALL: &str = r#"
name = "small"

[model]
name = "lorenz63"
dt = 0.005

[truth]
seed = 1
horizon = 1.0

[observations]
seed = 2
variance = 1.0

[method]
kind = "full_newton"
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("SHADOW_DA_OUTPUT_ROOT", root).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn run_writes_outputs_under_env_root() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", SMALL);
    let root = tmp.path().join("out");
    let out = run(&root, &["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["truth.csv", "observations.csv", "estimate.csv", "windows.csv", "scores.csv", "metadata.toml"] {
        assert!(root.join("small").join(f).is_file(), "missing {f}");
    }
    let scores = fs::read_to_string(root.join("small/scores.csv")).unwrap();
    assert!(scores.starts_with("# config_hash: "));
    assert!(scores.contains("label,c_truth,c,mse"));
    let meta = fs::read_to_string(root.join("small/metadata.toml")).unwrap();
    assert!(meta.contains("exit_code = 0"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&run(&a, &["run", cfg.to_str().unwrap()])), 0);
    assert_eq!(code(&run(&b, &["run", cfg.to_str().unwrap()])), 0);
    for f in ["truth.csv", "observations.csv", "estimate.csv", "scores.csv", "metadata.toml"] {
        assert_eq!(fs::read(a.join("small").join(f)).unwrap(), fs::read(b.join("small").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_key_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.cfg", &SMALL.replace("variance = 1.0", "variance = 1.0\nvarience = 2.0"));
    let out = run(tmp.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("varience"));
}

#[test]
fn out_of_range_value_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.cfg", &SMALL.replace("kind = \"full_newton\"", "kind = \"projected\"\np = 7"));
    let out = run(tmp.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("method.p"));
}

#[test]
fn missing_config_file_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let out = run(tmp.path(), &["run", tmp.path().join("nope.cfg").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn nonconvergence_is_a_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    let text = SMALL.replace("kind = \"full_newton\"", "kind = \"full_newton\"\nmax_iter = 1");
    let cfg = write_config(tmp.path(), "slow.cfg", &text);
    let out = run(tmp.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    // Outputs are still written and the failure is recorded.
    let meta = fs::read_to_string(tmp.path().join("small/metadata.toml")).unwrap();
    assert!(meta.contains("exit_code = 2"));

    let allowed = write_config(tmp.path(), "allowed.cfg", &format!("{text}\n[run]\nallow_nonconvergence = true\n"));
    assert_eq!(code(&run(tmp.path(), &["run", allowed.to_str().unwrap()])), 0);
}

#[test]
fn compare_refuses_different_observations() {
    let tmp = TempDir::new().unwrap();
    let a = write_config(tmp.path(), "a.cfg", SMALL);
    let b = write_config(tmp.path(), "b.cfg", &SMALL.replace("name = \"small\"", "name = \"other\"").replace("seed = 2", "seed = 3"));
    let out = run(tmp.path(), &["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("different observations"));
    assert!(!tmp.path().join("small").exists(), "nothing should run before the check");
}

#[test]
fn compare_runs_both_on_shared_observations() {
    let tmp = TempDir::new().unwrap();
    let a = write_config(tmp.path(), "a.cfg", SMALL);
    let b = SMALL
        .replace("name = \"small\"", "name = \"proj\"")
        .replace("kind = \"full_newton\"", "kind = \"projected\"\np = 2\n\n[windows]\ninit_len = 0.5\nwindow_len = 0.5");
    let b = write_config(tmp.path(), "b.cfg", &b);
    let out = run(tmp.path(), &["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(tmp.path().join("compare_small_vs_proj.csv")).unwrap();
    assert!(table.contains("\nsmall,") && table.contains("\nproj,"));
    assert!(table.contains("# iteration ratio"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = TempDir::new().unwrap();
    let text = SMALL.replace("kind = \"full_newton\"", "kind = \"projected\"\np = 2\n\n[windows]\ninit_len = 0.5\nwindow_len = 0.5")
        + "\n[sweep]\nkey = \"method.p\"\nvalues = [2, 3]\n";
    let cfg = write_config(tmp.path(), "sweep.cfg", &text);
    let out = run(tmp.path(), &["sweep", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = fs::read_to_string(tmp.path().join("small/sweep.csv")).unwrap();
    assert!(sweep.contains("\np=2,") && sweep.contains("\np=3,"));
    assert!(tmp.path().join("small/p_2/estimate.csv").is_file());

    // `sweep` on a config without a [sweep] section is a validation error.
    let plain = write_config(tmp.path(), "plain.cfg", SMALL);
    assert_eq!(code(&run(tmp.path(), &["sweep", plain.to_str().unwrap()])), 1);
}

#[test]
fn selftest_passes() {
    let tmp = TempDir::new().unwrap();
    let out = run(tmp.path(), &["selftest"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{text}");
    assert!(!text.contains("FAIL"));
    assert!(text.contains("checks passed"));
}
