//! End-to-end tests of the `hcma` binary: exit codes, artifacts, manifest
//! hashes and reproducibility.

use std::path::{Path, PathBuf};
use std::process::Command;

use hcma::harness::{sha256_hex, Manifest};

const TRIVIAL: &str = r#"
seed = 1

[model]
kind = "flat_torus"
area = 1.0
base_resolution = 32

[endpoints]
phi0 = []
phi1 = []

[analysis]
levels = [32, 64, 128]
roundtrip_levels = [32, 64, 128]
agreement_resolution = 32
kenergy_resolution = 32
random_torus = 100
random_sphere = 50
path_resolution = 32
capacity_resolution = 32
"#;

fn hcma() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hcma"));
    cmd.env_remove("HCMA_OUT_DIR");
    cmd
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> (i32, String) {
    let out = hcma().args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn trivial_run_passes_and_manifest_hashes_every_file() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TRIVIAL);
    let out = tmp.path().join("out");
    let (code, stdout) = run(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 12);

    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.all_passed, Some(true));
    let mut listed: Vec<&str> = manifest.files.iter().map(|f| f.name.as_str()).collect();
    listed.sort();
    assert_eq!(
        listed,
        [
            "analysis.json",
            "capacity.json",
            "curvature.csv",
            "kenergy.csv",
            "leaves.csv",
            "solution.csv",
            "solution.json",
            "verdicts.json"
        ]
    );
    for f in &manifest.files {
        let body = std::fs::read_to_string(out.join(&f.name)).unwrap();
        assert_eq!(sha256_hex(&body), f.sha256, "{}", f.name);
    }
}

#[test]
fn identical_config_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TRIVIAL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (dir, workers) in [(&a, "1"), (&b, "2")] {
        let (code, _) = run(&[
            "verify",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--workers",
            workers,
            "--check",
            "kenergy_torus,capacity",
        ]);
        assert_eq!(code, 0);
    }
    for name in ["verdicts.json", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn invalid_check_name_exits_2_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TRIVIAL);
    let out = tmp.path().join("out");
    let (code, _) =
        run(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--check", "roundtrip,nope"]);
    assert_eq!(code, 2);
    assert!(!out.exists());

    let (code, _) = run(&["run", "--config", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn empty_check_list_exits_0_with_empty_verdicts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TRIVIAL);
    let out = tmp.path().join("out");
    let output = hcma()
        .args(["verify", "--config", config.to_str().unwrap(), "--check="])
        .env("HCMA_OUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(out.join("verdicts.json")).unwrap().trim(), "[]");
}

#[test]
fn failing_check_exits_1() {
    // Fewer random potentials than the criterion demands: the check runs but fails.
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &TRIVIAL.replace("random_torus = 100", "random_torus = 10"));
    let out = tmp.path().join("out");
    let (code, stdout) = run(&[
        "verify",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--check",
        "kenergy_torus",
    ]);
    assert_eq!(code, 1, "{stdout}");
    assert!(stdout.starts_with("FAIL kenergy_torus"));
}

#[test]
fn pipeline_failure_exits_3_with_diagnostic() {
    // A near-degenerate target at a coarse grid: the leaf analysis cannot be calibrated.
    let tmp = tempfile::tempdir().unwrap();
    let body = TRIVIAL
        .replace("phi1 = []", "phi1 = [{ family = \"cos\", k = 1, coefficient = 0.0506 }]")
        .replace("base_resolution = 32", "base_resolution = 64");
    let config = write_config(tmp.path(), &format!("{body}capacity_family = [0.5, 1.0]\n"));
    let out = tmp.path().join("out");
    let (code, _) = run(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 3);
    let failure: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("failure.json")).unwrap()).unwrap();
    assert_eq!(failure["exit_code"], 3);
    assert!(!out.join("verdicts.json").exists());
}

#[test]
fn converge_and_dump_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TRIVIAL);
    let out = tmp.path().join("conv");
    let (code, stdout) = run(&[
        "converge",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--level-list",
        "32,64,128",
    ]);
    assert_eq!(code, 0);
    assert!(stdout.starts_with("quantity,parameter,value,order,status"));
    assert!(stdout.contains("hcma_residual,64,0.000000e0,exact,ok"));
    assert!(out.join("convergence.csv").exists());

    let (code, _) = run(&["converge", "--config", config.to_str().unwrap(), "--level-list", "32,48,64"]);
    assert_eq!(code, 2);

    let dump = tmp.path().join("dump");
    let (code, _) = run(&["dump", "--config", config.to_str().unwrap(), "--out", dump.to_str().unwrap()]);
    assert_eq!(code, 0);
    let phi0: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dump.join("phi0.json")).unwrap()).unwrap();
    assert_eq!(phi0["n"], 32);
    assert_eq!(phi0["kind"], "flat_torus");
}
