use std::path::PathBuf;
use std::process::{Command, Output};

fn input(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../inputs").join(name)
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("crprime-cli-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d.join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crprime")).args(args).env_remove("CRPRIME_THREADS").output().unwrap()
}

fn report(path: &PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn solve_ball_succeeds() {
    let out = scratch("solve.json");
    let o = run(&["solve", "--input", input("ball1.json").to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["command"], "solve");
    assert_eq!(r["pass"], true);
    assert!(r["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));
}

#[test]
fn degenerate_input_exits_one() {
    let o = run(&["solve", "--input", input("bad.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("input"));
}

#[test]
fn unknown_field_rejected() {
    let p = scratch("unknown.json");
    std::fs::write(&p, r#"{"schema":1,"n":1,"rho":[{"zpow":[0,0],"zbarpow":[0,0],"re":1,"im":0,"extra":2}]}"#).unwrap();
    assert_eq!(run(&["solve", "--input", p.to_str().unwrap()]).status.code(), Some(1));
    std::fs::write(&p, r#"{"schema":2,"n":1,"rho":[]}"#).unwrap();
    assert_eq!(run(&["solve", "--input", p.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn bad_flags_exit_one() {
    assert_eq!(run(&["solve", "--n", "3"]).status.code(), Some(1));
    assert_eq!(run(&["qprime", "--eps-ratio", "1.5"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn failing_check_exits_two() {
    // an absurd tolerance forces every check to fail
    let o = run(&["solve", "--n", "1", "--tol", "1e-300"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn qprime_csv_and_determinism() {
    let (a, b, csv) = (scratch("q1.json"), scratch("q2.json"), scratch("q.csv"));
    let base = ["qprime", "--n", "1", "--grid", "6", "--threads", "1"];
    let o = run(&[&base[..], &["--output", a.to_str().unwrap(), "--csv", csv.to_str().unwrap()]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[&base[..], &["--output", b.to_str().unwrap()]].concat());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&a).unwrap(), std::fs::read_to_string(&b).unwrap());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epsilon,value"));
    assert_eq!(lines.count(), 25);
    let q = report(&a)["results"]["totals"]["route_def"].as_f64().unwrap();
    assert!((q - 8.0 * std::f64::consts::PI.powi(2)).abs() < 1e-8, "{q}");
}

#[test]
fn thread_env_fallback() {
    let out = scratch("env.json");
    let o = Command::new(env!("CARGO_BIN_EXE_crprime"))
        .args(["solve", "--n", "1", "--output", out.to_str().unwrap()])
        .env("CRPRIME_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(report(&out)["config"]["threads"], 2);
    let o = Command::new(env!("CARGO_BIN_EXE_crprime")).args(["solve", "--n", "1"]).env("CRPRIME_THREADS", "0").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
