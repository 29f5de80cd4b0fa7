use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn linear_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/linear.toml")
}

fn ccmplan(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccmplan"))
        .args(args)
        .env("CCMPLAN_OUT", out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn plan_before_certify_is_a_missing_artifact() {
    let out = tempfile::tempdir().unwrap();
    let cfg = linear_config();
    let o = ccmplan(out.path(), &["--config", cfg.to_str().unwrap(), "plan"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing prerequisite"));
}

#[test]
fn bad_config_exits_with_one() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("bad.toml");
    std::fs::write(&cfg, "system = \"linear\"\nno_such_key = 3\n").unwrap();
    let o = ccmplan(out.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    let o = ccmplan(out.path(), &["--config", "/nonexistent.toml", "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn full_linear_run_succeeds() {
    let out = tempfile::tempdir().unwrap();
    let cfg = linear_config();
    let o = ccmplan(
        out.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "all",
            "scenarios.random.count=2",
            "execute.trials_per_plan=2",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("report: ok"));
    let root = out.path().join("runs/linear");
    for f in [
        "certify/certificate.json",
        "domain/domain.json",
        "plans/index.json",
        "trials/results.json",
        "reports/table.json",
    ] {
        assert!(root.join(f).exists(), "{f} missing");
    }
}
