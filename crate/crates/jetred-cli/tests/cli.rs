use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn jetred(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jetred")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn example(dir: &Path, name: &str) -> PathBuf {
    let o = jetred(&["example", name]);
    assert_eq!(code(&o), 0);
    write(dir, &format!("{name}.jr"), &String::from_utf8(o.stdout).unwrap())
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("JSON on stdout")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const NOT_CLOSED: &str = "[model]
name = nc
[variables]
independent = x
dependent = u
[generators]
G1 = x*u_xx
G2 = u_x
[drivers]
t = time: G1
W = wiener: G2
[initial]
u = x
";

#[test]
fn check_closed_and_transversal() {
    let dir = TempDir::new().unwrap();
    let m = example(dir.path(), "hunter-saxton");
    let o = jetred(&["check", s(&m)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert_eq!(v["closure"]["status"], "closed");
    assert_eq!(v["closure"]["algebra"]["dim"], 5);
    assert_eq!(v["transversality"]["transversal"], true);
}

#[test]
fn check_reports_degenerate_initial_curve() {
    let dir = TempDir::new().unwrap();
    let m = example(dir.path(), "hjm");
    let o = jetred(&["check", s(&m), "--format", "text"]);
    assert_eq!(code(&o), 3);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("not transversal"), "{text}");
}

#[test]
fn check_not_closed_exits_3() {
    let dir = TempDir::new().unwrap();
    let m = write(dir.path(), "nc.jr", NOT_CLOSED);
    let o = jetred(&["check", s(&m)]);
    assert_eq!(code(&o), 3);
    let v = json(&o);
    assert_eq!(v["closure"]["status"], "not_closed");
    assert_eq!(v["closure"]["witness"][0][0], "u_xx");
    // The reduction itself refuses the model too.
    assert_eq!(code(&jetred(&["reduce", s(&m)])), 3);
}

#[test]
fn model_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let bad = write(dir.path(), "bad.jr", "[model\n");
    let o = jetred(&["check", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    assert_eq!(code(&jetred(&["reduce", s(&dir.path().join("missing.jr"))])), 2);
    assert_eq!(code(&jetred(&["example", "nope"])), 2);
}

#[test]
fn example_round_trips() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("z.jr");
    assert_eq!(code(&jetred(&["example", "zakai", "--out", s(&out)])), 0);
    let o = jetred(&["reduce", s(&out), "--format", "text"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() >= 3, "{text}");
}

#[test]
fn phi_lists_fields() {
    let dir = TempDir::new().unwrap();
    let m = example(dir.path(), "hjm");
    let o = jetred(&["phi", s(&m)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().contains("exp(-c)"));
}

#[test]
fn simulate_is_seed_deterministic() {
    let dir = TempDir::new().unwrap();
    let m = example(dir.path(), "hjm");
    let run = |seed: &str| {
        let o = jetred(&["simulate", s(&m), "--t-final", "0.02", "--dt", "0.001", "--paths", "3", "--seed", seed]);
        assert_eq!(code(&o), 0);
        o.stdout
    };
    let a = run("9");
    assert_eq!(a, run("9"));
    assert_ne!(a, run("10"));
    let mut rdr = csv::Reader::from_reader(a.as_slice());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, ["path", "t", "a", "b", "c", "d"]);
    assert_eq!(rdr.records().count(), 3 * 21);
}

#[test]
fn simulate_writes_directory() {
    let dir = TempDir::new().unwrap();
    let m = example(dir.path(), "hunter-saxton");
    let out = dir.path().join("run");
    let o = jetred(&["simulate", s(&m), "--t-final", "0.01", "--dt", "0.001", "--paths", "2", "--snapshots", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["exploded"], 0);
    for f in ["path_0.csv", "path_1.csv", "curve_0.csv", "curve_1.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn validate_reports_small_error() {
    let dir = TempDir::new().unwrap();
    let m = example(dir.path(), "hjm");
    let out = dir.path().join("val");
    let o = jetred(&["validate", s(&m), "--t-final", "0.02", "--dx", "0.01", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(out.join("reduced.csv").exists() && out.join("fd.csv").exists());
    let snaps = metrics["metrics"].as_array().expect("snapshot list");
    assert!(!snaps.is_empty());
    for snap in snaps {
        assert!(snap["rel_l2"].as_f64().unwrap() <= 5e-2, "{snap}");
    }
}

#[test]
fn explosion_in_validate_exits_4() {
    // du = u² dt from u = 2 + x leaves every chart by t = 1/3.
    let dir = TempDir::new().unwrap();
    let m = write(
        dir.path(),
        "riccati.jr",
        "[model]\nname = riccati\n[variables]\nindependent = x\ndependent = u\n[generators]\nG1 = u^2\n[drivers]\nt = time: G1\n[initial]\nu = 2 + x\n[grid]\nx0 = 0\nx1 = 1\ndx = 0.05\n[simulation]\nt_final = 1\ndt = 0.001\n",
    );
    let o = jetred(&["validate", s(&m)]);
    assert_eq!(code(&o), 4);
    assert_eq!(json(&o)["fd_status"]["status"], "exploded");
    let out = dir.path().join("sim");
    assert_eq!(code(&jetred(&["simulate", s(&m), "--paths", "1", "--out", s(&out)])), 0);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let t = manifest["status"][0]["t"].as_f64().unwrap();
    assert!((t - 1.0 / 3.0).abs() < 0.01, "exploded at {t}");
}
