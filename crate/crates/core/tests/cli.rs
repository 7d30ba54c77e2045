//! End-to-end checks of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainteacher"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("BRAINTEACHER_DATA")
        .output()
        .unwrap()
}

fn smoke_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml").display().to_string()
}

#[test]
fn smoke_run_then_summarize_in_any_order() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seeds: &str| {
        let out = dir.path().join(name);
        let o = bin(&["run", "--config", &smoke_config(), "--seeds", seeds, "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a", "1");
    let b = run("b", "2");
    for f in ["manifest.json", "experiment.toml", "figures/fig2_accuracy_vs_r.csv", "figures/layer_placement.csv"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    assert!(!a.join("INCOMPLETE").exists());

    let s1 = dir.path().join("s1");
    let s2 = dir.path().join("s2");
    let o = bin(&["summarize", a.to_str().unwrap(), b.to_str().unwrap(), "--out-dir", s1.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bin(&["summarize", b.to_str().unwrap(), a.to_str().unwrap(), "--out-dir", s2.to_str().unwrap()]);
    assert!(o.status.success());
    for f in ["summary_by_epoch.csv", "summary_final.csv"] {
        let x = std::fs::read(s1.join(f)).unwrap();
        assert_eq!(x, std::fs::read(s2.join(f)).unwrap(), "{f}");
    }
    let fin = std::fs::read_to_string(s1.join("summary_final.csv")).unwrap();
    // Both single-seed runs share a label and pool into two seeds.
    assert_eq!(fin.lines().count(), 2);
    assert!(fin.lines().nth(1).unwrap().contains(",2,"), "{fin}");

    let o = bin(&["summarize", a.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("single seed"));
}

#[test]
fn failures_exit_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!bin(&["summarize", dir.path().to_str().unwrap()]).status.success());
    let bad = dir.path().join("record.json");
    std::fs::write(&bad, r#"{"schema": 99}"#).unwrap();
    let o = bin(&["summarize", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!bin(&["run", "--config", "/nonexistent.toml"]).status.success());
    assert!(!bin(&["teacher", "--teacher", "kind=banana", "--out", "x"]).status.success());
    let o = bin(&["gradcheck", "--samples", "5", "--tolerance", "1e-30"]);
    assert!(!o.status.success());
    let o = bin(&["gradcheck", "--samples", "20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn teacher_command_writes_a_loadable_rsm() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("random.rsm");
    let o = bin(&["teacher", "--config", &smoke_config(), "--teacher", "kind=random_v1_stats,seed=2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rsm = brainteacher::rsm::load_rsm(&out).unwrap();
    assert_eq!(rsm.size(), 40);
}
