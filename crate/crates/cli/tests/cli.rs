use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mpd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpd"))
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .unwrap()
}

const SMALL: &[&str] = &[
    "--replications",
    "3",
    "--n-obs",
    "5",
    "--phase2-steps",
    "2",
    "--threads",
    "1",
];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(tail).copied().collect()
}

#[test]
fn fit_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = mpd(dir.path(), &with(&["fit", "-o", "out"], SMALL));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "data.csv",
        "trajectories.csv",
        "terminals.csv",
        "summary.json",
        "timing.json",
        "kde_theta_1.csv",
    ] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "replications = 2\nseed = 9\n[output]\ndir = \"from_file\"\n",
    )
    .unwrap();
    let o = mpd(
        dir.path(),
        &with(
            &["fit", "-c", "c.toml", "--replications", "3", "-o", "from_flag"],
            &SMALL[2..],
        ),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("from_file").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("from_flag/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_replications"], 3);
    assert_eq!(summary["config"]["seed"], 9);
}

#[test]
fn aborted_run_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = mpd(
        dir.path(),
        &with(&["fit", "--max-proposals", "1", "--safety-log", "5"], SMALL),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("aborted"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "replications = \"many\"\n").unwrap();
    for args in [
        vec!["fit", "-c", "bad.toml"],
        vec!["fit", "-c", "missing.toml"],
        vec!["fit", "--eta", "-1"],
        vec!["fit", "--set", "no_equals"],
        vec!["fit", "--set", "grid.nonsense=3"],
        vec!["fit", "--model", "heston"],
        vec!["diagnose", "martingale", "--theta", "1,x"],
        vec!["frobnicate"],
    ] {
        let o = mpd(dir.path(), &args);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn generate_then_fit_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = mpd(
        dir.path(),
        &["generate", "--model", "slv", "--n-obs", "6", "--out", "series.csv"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = mpd(
        dir.path(),
        &[
            "fit",
            "--model",
            "slv",
            "--data",
            "series.csv",
            "--replications",
            "2",
            "--phase2-steps",
            "1",
            "-o",
            "f",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let data = fs::read_to_string(dir.path().join("f/data.csv")).unwrap();
    assert_eq!(data, fs::read_to_string(dir.path().join("series.csv")).unwrap());
    // An OU run cannot read a two-dimensional series.
    let o = mpd(dir.path(), &["fit", "--data", "series.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn kde_from_terminals() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        mpd(dir.path(), &with(&["fit", "-o", "r"], SMALL)).status.code(),
        Some(0)
    );
    let o = mpd(
        dir.path(),
        &["kde", "--input", "r/terminals.csv", "--out-dir", "k", "--points", "32"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("k/kde_theta_1.csv")).unwrap();
    assert_eq!(table.lines().count(), 33);
    let o = mpd(dir.path(), &["kde", "--input", "r/summary.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn martingale_diagnostic_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = mpd(
        dir.path(),
        &[
            "diagnose",
            "martingale",
            "--draws",
            "1000",
            "--theta-aux",
            "tied",
            "-o",
            "d",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["n_draws"], 1000);
    assert!(v["z"][0].as_f64().unwrap().abs() <= 4.0);
    assert!(dir.path().join("d/diagnose_martingale.json").exists());
    let o = mpd(dir.path(), &["diagnose", "martingale", "--draws", "10"]);
    assert_eq!(o.status.code(), Some(2));
}
