use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn meanfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meanfield")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL_SOLVE: &str = "seed = 4\n[model]\nbuiltin = \"lq-1pop\"\n[solver]\nsteps = 8\nn_paths = 128\n";

#[test]
fn missing_or_malformed_config_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(meanfield(&["solve"]).status.code(), Some(2));
    let bad = write(tmp.path(), "bad.toml", "[model]\nbuiltin = \"lq-1pop\"\nstep_count = 3\n");
    let out = meanfield(&["solve", "--config", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step_count"));
    let unknown = write(tmp.path(), "unknown.toml", "[model]\nbuiltin = \"no-such-game\"\n");
    assert_eq!(meanfield(&["solve", "--config", &unknown]).status.code(), Some(2));
}

#[test]
fn experiment_kind_must_match_the_command() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("o");
    let cfg = configs().join("nonquadratic-box.toml");
    let out = meanfield(&["solve", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validate_shipped_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("v");
    let cfg = configs().join("nonquadratic-box.toml");
    let out = meanfield(&["validate", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert!(report.is_object());
    assert!(out_dir.join("config.resolved.toml").exists());
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "solve.toml", SMALL_SOLVE);
    let first = tmp.path().join("first");
    let out = meanfield(&["solve", "--config", &cfg, "--seed", "9", "--out", first.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = first.join("config.resolved.toml");
    let text = std::fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("seed = 9"));
    let second = tmp.path().join("second");
    let out = meanfield(&["solve", "--config", resolved.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    for name in ["history.csv", "flows_0.csv", "costs.json", "config.resolved.toml"] {
        assert_eq!(std::fs::read(first.join(name)).unwrap(), std::fs::read(second.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn nonconverged_solve_needs_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{SMALL_SOLVE}[fixed_point]\nfp_tol = 1e-12\nmax_iter = 2\n");
    let cfg = write(tmp.path(), "strict.toml", &text);
    let out_dir = tmp.path().join("s");
    let base = ["solve", "--config", &cfg, "--out", out_dir.to_str().unwrap()];
    assert_eq!(meanfield(&base).status.code(), Some(1));
    let mut allowed = base.to_vec();
    allowed.push("--allow-nonconverged");
    assert_eq!(meanfield(&allowed).status.code(), Some(0));
}

#[test]
fn custom_model_file_is_inlined() {
    let tmp = tempfile::tempdir().unwrap();
    let model = std::fs::read_to_string(configs().join("models/two-pop.toml")).unwrap();
    std::fs::create_dir(tmp.path().join("models")).unwrap();
    write(&tmp.path().join("models"), "two-pop.toml", &model);
    let cfg = write(
        tmp.path(),
        "custom.toml",
        "[model]\nfile = \"models/two-pop.toml\"\n[solver]\nsteps = 8\nn_paths = 128\n",
    );
    let out_dir = tmp.path().join("c");
    let out = meanfield(&["solve", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = std::fs::read_to_string(out_dir.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("[model.lq]"));
    assert!(!resolved.contains("file ="));
    assert!(out_dir.join("flows_1.csv").exists());
}
