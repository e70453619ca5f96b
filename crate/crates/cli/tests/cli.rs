use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/traffic.csv")
}

fn bicb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bicb"))
        .args(args)
        .env_remove("BICB_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bicb(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn generate_counts_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["generate", "--n", "10000", "--steps", "48", "--seed", "0", "--out", s(&a)]);
    ok(&["generate", "--n", "10000", "--steps", "48", "--seed", "0", "--out", s(&b)]);
    assert_eq!(rows(&a).len(), 10000);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let empty = dir.path().join("e.csv");
    ok(&["generate", "--n", "0", "--out", s(&empty)]);
    assert_eq!(fs::read_to_string(&empty).unwrap(), "period_id,step,pctr,wp,obj\n");
}

#[test]
fn seed_flag_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, args: &[&str], name: &str| {
        let p = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_bicb"));
        cmd.env_remove("BICB_SEED");
        if let Some(v) = env {
            cmd.env("BICB_SEED", v);
        }
        let out = cmd.args(args).args(["generate", "--n", "50", "--out", s(&p)]).output().unwrap();
        assert!(out.status.success());
        fs::read(p).unwrap()
    };
    let env3 = run(Some("3"), &[], "a");
    let flag3 = run(None, &["--seed", "3"], "b");
    let both = run(Some("9"), &["--seed", "3"], "c");
    let zero = run(None, &[], "d");
    assert_eq!(env3, flag3);
    assert_eq!(both, flag3);
    assert_ne!(zero, flag3);
}

#[test]
fn unknown_flags_fail() {
    assert!(!bicb(&["generate", "--frobnicate"]).status.success());
    assert!(!bicb(&["simulate", "--methods", "bicb,unknown"]).status.success());
    assert!(!bicb(&["dance"]).status.success());
}

#[test]
fn simulate_fixture_all_methods_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&["simulate", "--traffic", s(&fixture()), "--out-dir", s(&out)]);
    let report = rows(&out.join("report.csv"));
    assert_eq!(report.len(), 6);
    for r in &report {
        assert_eq!(r[1], "bcb");
        let br: f64 = r[4].parse().unwrap();
        let ocr: f64 = r[6].parse().unwrap();
        assert!((0.0..=1.0 + 1e-9).contains(&br) && (0.0..=1.0).contains(&ocr), "{r:?}");
    }
    assert_eq!(rows(&out.join("campaigns.csv")).len(), 10);

    // same seed, same bytes
    let again = dir.path().join("again");
    ok(&["simulate", "--traffic", s(&fixture()), "--out-dir", s(&again)]);
    assert_eq!(fs::read(out.join("report.csv")).unwrap(), fs::read(again.join("report.csv")).unwrap());
    assert_eq!(
        fs::read(out.join("episodes/bicb/c003.csv")).unwrap(),
        fs::read(again.join("episodes/bicb/c003.csv")).unwrap()
    );

    ok(&["report", "--out-dir", s(&out)]);
    let plot = out.join("plots/bicb_star/c000.csv");
    let text = fs::read_to_string(&plot).unwrap();
    assert!(text.starts_with("step,p,q_u,q_l,alpha,beta,cum_cost,cum_clicks,cum_value\n"));
    for m in ["manual", "pid", "online_lp", "bicb", "bicb_star"] {
        assert_eq!(fs::read_dir(out.join("plots").join(m)).unwrap().count(), 10, "{m}");
    }
    // with foresight the duals barely move after the first step
    for entry in fs::read_dir(out.join("plots/bicb_star")).unwrap() {
        let ps: Vec<f64> = rows(&entry.unwrap().path())[1..]
            .iter()
            .map(|r| r[1].parse().unwrap())
            .collect();
        let hi = ps.iter().copied().fold(f64::MIN, f64::max);
        let lo = ps.iter().copied().fold(f64::MAX, f64::min);
        assert!((hi - lo) / hi <= 0.2, "p ranges over [{lo}, {hi}]");
    }
}

#[test]
fn simulate_subset_of_methods() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "simulate",
        "--setting",
        "bicb",
        "--methods",
        "bicb,offline_lp",
        "--traffic",
        s(&fixture()),
        "--out-dir",
        s(dir.path()),
    ]);
    let report = rows(&dir.path().join("report.csv"));
    assert_eq!(report.len(), 2);
    assert_eq!(report[1][0], "offline_lp");
    assert_eq!(report[1][5].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn simulate_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = bicb(&["simulate", "--traffic", s(&missing), "--out-dir", s(dir.path())]);
    assert!(!out.status.success());
    let out = bicb(&["simulate", "--campaigns", "0", "--out-dir", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("campaigns"));
}

#[test]
fn train_then_simulate_with_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    let text = ok(&[
        "train",
        "--traffic",
        s(&fixture()),
        "--eval-period",
        "day-2",
        "--calibration",
        "0.9",
        "--out",
        s(&model),
    ]);
    assert!(text.contains("relative error"), "{text}");
    let meta = fs::read_to_string(&model).unwrap();
    assert!(meta.contains("\"day-1\"") && meta.contains("0.9"), "{meta}");
    ok(&[
        "simulate",
        "--traffic",
        s(&fixture()),
        "--methods",
        "bicb",
        "--model",
        s(&model),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(rows(&dir.path().join("report.csv")).len(), 1);
    assert!(!bicb(&["train", "--traffic", s(&fixture()), "--periods", "day-9"]).status.success());
}

#[test]
fn verify_small_suites_pass_and_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let args = |d: &str| {
        vec![
            "verify".to_owned(),
            "--instances".into(),
            "100".into(),
            "--monotone-instances".into(),
            "10".into(),
            "--solves".into(),
            "50".into(),
            "--positivity-campaigns".into(),
            "10".into(),
            "--out-dir".into(),
            d.into(),
        ]
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let text = ok(&args(s(&a)).iter().map(String::as_str).collect::<Vec<_>>());
    ok(&args(s(&b)).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(text.matches("PASS").count(), 5, "{text}");
    assert_eq!(fs::read(a.join("verify.csv")).unwrap(), fs::read(b.join("verify.csv")).unwrap());
}

#[test]
fn verify_fails_on_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = bicb(&["verify", "--max-n", "40", "--out-dir", s(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn report_needs_episode_logs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!bicb(&["report", "--out-dir", s(dir.path())]).status.success());
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = bicb(&["report", "--episodes", s(&empty)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no episode logs"));
}
