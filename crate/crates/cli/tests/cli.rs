use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
    "hierarchy": {"coarse_dims": [4, 4], "num_levels": 2},
    "darcy": {"sigma_eta": 0.05},
    "mcmc": {"n_fine_samples": 5, "subsample": [2]},
    "output": {"record_wall_time": false}
}"#;

fn mlmcmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlmcmc")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.in.json");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn invalid_configuration_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"mcmc": {"n_fine": 10}}"#);
    let out = mlmcmc(&["generate-data", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let missing = mlmcmc(&["generate-data", "--config", "/nonexistent/config.json"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn missing_dependencies_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().to_str().unwrap();
    let out = mlmcmc(&["run-chain", "--config", &cfg, "--out", out_dir]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(mlmcmc(&["generate-data", "--config", &cfg, "--out", out_dir])
        .status
        .success());
    let out = mlmcmc(&["run-chain", "--config", &cfg, "--out", out_dir, "--mode", "filtered"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn chains_are_reproducible_and_diagnosable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().to_str().unwrap();
    assert!(mlmcmc(&["generate-data", "--config", &cfg, "--out", out_dir])
        .status
        .success());
    let chain = dir.path().join("chains/reference.csv");
    let run = || {
        let out = mlmcmc(&[
            "run-chain",
            "--config",
            &cfg,
            "--out",
            out_dir,
            "--mode",
            "reference",
            "--seed",
            "9",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(&chain).unwrap()
    };
    let first = run();
    assert_eq!(first, run());
    assert!(String::from_utf8_lossy(&first).starts_with("# mlmcmc "));

    let report_dir = dir.path().join("report");
    let out = mlmcmc(&[
        "diagnostics",
        "--config",
        &cfg,
        "--out",
        report_dir.to_str().unwrap(),
        chain.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report_dir.join("report.json").is_file());
    assert!(report_dir.join("table1.csv").is_file());

    // a chain on other data is refused
    let other = dir.path().join("other.csv");
    let text = String::from_utf8(first).unwrap();
    let hash_start = text.find("data_hash=").unwrap() + "data_hash=".len();
    let mut changed = text.clone();
    changed.replace_range(hash_start..hash_start + 4, "0000");
    fs::write(&other, changed).unwrap();
    fs::copy(
        dir.path().join("chains/reference.manifest.json"),
        dir.path().join("other.manifest.json"),
    )
    .unwrap();
    let out = mlmcmc(&[
        "diagnostics",
        "--out",
        report_dir.to_str().unwrap(),
        chain.to_str().unwrap(),
        other.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn sample_grf_writes_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = mlmcmc(&[
        "sample-grf",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
        "--count",
        "2",
        "--level",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("grf.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "sample,cell,x,y,value");
    assert_eq!(text.lines().count(), 1 + 2 * 64);
}
