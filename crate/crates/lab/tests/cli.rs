use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_feedback-lab");

fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("FEEDBACK_LAB_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn poly_check_prints_the_witness() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(dir.path(), &["poly-check", "--exponents", "5"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "IMPOSSIBLE, witness z≈2.5, P(z)=-1.25");
    assert!(dir.path().join("results/poly-check.csv").exists());
}

#[test]
fn mjls_solve_single_scalar_mode() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(dir.path(), &["mjls-solve", "--spec", &fixture("single_mode.toml"), "--no-timestamp"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("M_0 = 1\n"), "{text}");
    assert!(text.contains("K_0 = 0.7\n"), "{text}");
    let csv = std::fs::read_to_string(dir.path().join("results/mjls-solve.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "solved");
    assert!(row[2].parse::<f64>().unwrap() < 1e-10);
}

#[test]
fn strict_exits_3_on_undecided_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["mjls-solve", "--scalar", "0,2,0.5", "--max-iter", "50", "--force"];
    let o = lab(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("verdict: indeterminate"));
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(lab(dir.path(), &strict).status.code(), Some(3));
}

#[test]
fn collisions_need_force() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["highorder-check", "--out", "o"];
    assert_eq!(lab(dir.path(), &args).status.code(), Some(0));
    let again = lab(dir.path(), &args);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(lab(dir.path(), &["highorder-check", "--out", "o", "--force"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lab(dir.path(), &["poly-check", "--exponents", "1,3"]).status.code(), Some(2));
    assert_eq!(lab(dir.path(), &["parametric-sweep", "--b", "3:1:1"]).status.code(), Some(2));
    assert_eq!(lab(dir.path(), &["no-such-command"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "experiment = \"poly-check\"\nexponents = [5.0]\ncolour = \"red\"\n").unwrap();
    let o = lab(dir.path(), &["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    // config for one experiment, subcommand for another
    assert_eq!(
        lab(dir.path(), &["--config", &fixture("sweep.toml"), "poly-check"]).status.code(),
        Some(2)
    );
    assert_eq!(lab(dir.path(), &["run", "missing.toml"]).status.code(), Some(1));
}

#[test]
fn reruns_are_byte_identical_without_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let o = lab(dir.path(), &["run", &fixture("sweep.toml"), "--out", out]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(dir.path().join(out).join("parametric-sweep.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert!(String::from_utf8(a).unwrap().starts_with("b,blowup_fraction,mean_regret_slope\r\n"));

    let stamped = lab(dir.path(), &["poly-check", "--out", "s"]);
    assert_eq!(stamped.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("s/poly-check.csv")).unwrap();
    assert!(text.starts_with("# generated "));
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, extra: &[&str], out: &str| {
        let mut cmd = Command::new(BIN);
        cmd.current_dir(dir.path())
            .args(["run", &fixture("sweep.toml"), "--format", "json", "--out", out])
            .args(extra)
            .env_remove("FEEDBACK_LAB_SEED");
        if let Some(s) = env {
            cmd.env("FEEDBACK_LAB_SEED", s);
        }
        assert_eq!(cmd.output().unwrap().status.code(), Some(0));
        let text = std::fs::read_to_string(dir.path().join(out).join("parametric-sweep-detail.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(run(None, &[], "a"), 7);
    assert_eq!(run(Some("99"), &[], "b"), 99);
    assert_eq!(run(Some("99"), &["--seed", "5"], "c"), 5);
    let o = Command::new(BIN)
        .current_dir(dir.path())
        .args(["poly-check", "--out", "d"])
        .env("FEEDBACK_LAB_SEED", "minus one")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_names_the_results() {
    let o = Command::new(BIN).arg("--help").output().unwrap();
    let text = stdout(&o);
    for needle in ["Critical exponent theorem", "Characteristic polynomial criterion", "Critical radius theorem", "Sampled-data regimes", "Coupled Riccati criterion"] {
        assert!(text.contains(needle), "{needle}");
    }
}
