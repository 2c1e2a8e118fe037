use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dualfilter");

const BASE: &str = r#"
experiment = "duality-check"

[model]
d = 3
A = [-2.0, 1.0, 1.0, 1.0, -3.0, 2.0, 2.0, 2.0, -4.0]
h = [-1.0, 0.0, 1.0]
prior = [0.3333333333333333, 0.3333333333333333, 0.3333333333333334]
T = 1.0

[grid]
n_steps = 50

[mc]
n_paths = 2000
seed = 7

[control]
kind = "constant"
value = 0.5

[terminal]
kind = "function"
values = [0.0, 1.0, 2.0]

[output]
directory = "out"
formats = ["csv"]
dump_paths = 5
"#;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn dualfilter(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

#[test]
fn validate_accepts_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.toml", BASE);
    let o = dualfilter(&["validate", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "ok");
}

#[test]
fn validate_reports_prior_off_simplex() {
    let dir = tempfile::tempdir().unwrap();
    let bad = BASE.replace(
        "prior = [0.3333333333333333, 0.3333333333333333, 0.3333333333333334]",
        "prior = [0.3, 0.3, 0.3]",
    );
    let cfg = write(dir.path(), "prior.toml", &bad);
    let o = dualfilter(&["validate", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().count(), 1, "{out}");
    assert!(out.contains("not on the simplex"), "{out}");
}

#[test]
fn validate_reports_degenerate_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "grid.toml",
        &BASE.replace("n_steps = 50", "n_steps = 0"),
    );
    let o = dualfilter(&["validate", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("degenerate grid"), "{}", text(&o));
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    for cmd in ["validate", "run"] {
        let o = dualfilter(&[cmd, missing.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{cmd}: {}", text(&o));
    }
}

#[test]
fn run_rejects_negative_rate() {
    let dir = tempfile::tempdir().unwrap();
    let bad = BASE.replace(
        "A = [-2.0, 1.0, 1.0, 1.0, -3.0, 2.0, 2.0, 2.0, -4.0]",
        "A = [-2.0, 1.0, 1.0, 1.0, -3.0, 2.0, 2.0, -1.0, -1.0]",
    );
    let cfg = write(dir.path(), "rate.toml", &bad);
    let out = dir.path().join("out");
    let o = dualfilter(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("A(3,2) = -1 is negative"), "{}", text(&o));
}

#[test]
fn run_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", BASE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = dualfilter(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        a.to_str().unwrap(),
        "--workers",
        "1",
    ]);
    let ob = dualfilter(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
        "--workers",
        "3",
    ]);
    assert_eq!(oa.status.code(), Some(0), "{}", text(&oa));
    assert_eq!(ob.status.code(), Some(0), "{}", text(&ob));
    let mut csvs: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with(".csv"))
        .collect();
    csvs.sort();
    assert!(!csvs.is_empty());
    for name in csvs {
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?} differs"
        );
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("verdict = pass"), "{manifest}");
}
