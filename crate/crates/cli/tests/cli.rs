use std::fs;
use std::path::Path;
use std::process::Command;

use ccm_cli::{cmd_demo_counterexample, cmd_simulate, cmd_validate, cmd_verify, exit, RunConfig};
use serde_json::Value;

const THREE_STATE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/three-state.json");

fn cfg(out: &Path, spec: &str) -> RunConfig {
    RunConfig {
        spec: Some(spec.into()),
        out: out.to_path_buf(),
        timestamp: false,
        ..RunConfig::default()
    }
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn bundled_text(name: &str) -> String {
    ccm_core::bundled::ALL.iter().find(|(n, _)| *n == name).unwrap().1.to_string()
}

#[test]
fn validate_accepts_bundled_and_fixture_specs() {
    let dir = tempfile::tempdir().unwrap();
    for spec in ["builtin:counterexample", "builtin:double-integrator", "builtin:bounded-gain", THREE_STATE] {
        let o = cmd_validate(&cfg(dir.path(), spec));
        assert_eq!(o.code, exit::PASS, "{spec}: {}", o.stderr);
        assert!(o.stdout.ends_with("valid\n"));
    }
}

#[test]
fn validate_reports_truncated_json() {
    let dir = tempfile::tempdir().unwrap();
    let text = bundled_text("counterexample");
    let path = dir.path().join("truncated.json");
    fs::write(&path, &text[..text.len() / 2]).unwrap();
    let o = cmd_validate(&cfg(dir.path(), path.to_str().unwrap()));
    assert_eq!(o.code, exit::INPUT);
    assert!(o.stderr.contains("invalid JSON") && o.stderr.contains("line"), "{}", o.stderr);
}

#[test]
fn validate_reports_input_matrix_shape() {
    let dir = tempfile::tempdir().unwrap();
    let text = bundled_text("bounded-gain").replace(r#"[["1 + 0.5*sin(x1)"]]"#, r#"[["1", "2"]]"#);
    let path = dir.path().join("bad.json");
    fs::write(&path, text).unwrap();
    let o = cmd_validate(&cfg(dir.path(), path.to_str().unwrap()));
    assert_eq!(o.code, exit::INPUT);
    assert!(o.stderr.contains("B has 2 columns, m=1"), "{}", o.stderr);
}

#[test]
fn validate_rejects_unknown_builtin_and_missing_spec() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmd_validate(&cfg(dir.path(), "builtin:nope"));
    assert_eq!(o.code, exit::INPUT);
    assert!(o.stderr.contains("available"));
    let mut c = cfg(dir.path(), "");
    c.spec = None;
    assert_eq!(cmd_validate(&c).code, exit::INPUT);
}

#[test]
fn verify_counterexample_fails_on_integrability_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmd_verify(&cfg(dir.path(), "builtin:counterexample"));
    assert_eq!(o.code, exit::FAIL, "{}", o.stderr);
    let r = report(dir.path());
    let v = &r["verification"];
    assert_eq!(v["ccm"]["pass"], true);
    assert_eq!(v["integrability"]["pass"], false);
    assert_eq!(v["integrability"]["blow_up"], true);
    let e = v["integrability"]["growth"]["exponent"].as_f64().unwrap();
    assert!((e + 3.0).abs() < 1e-3, "{e}");
    assert!(r.get("generated_unix").is_none());
}

#[test]
fn verify_passing_specs() {
    let dir = tempfile::tempdir().unwrap();
    for spec in ["builtin:double-integrator", "builtin:bounded-gain", THREE_STATE] {
        let out = dir.path().join(spec.replace([':', '/'], "_"));
        let o = cmd_verify(&cfg(&out, spec));
        assert_eq!(o.code, exit::PASS, "{spec}: {}{}", o.stdout, o.stderr);
        let psi = report(&out)["verification"]["integrability"]["max_psi"].as_f64().unwrap();
        assert!(psi.is_finite());
    }
    // bounded gain carries a transform section
    let r = report(&dir.path().join("builtin_bounded-gain"));
    assert_eq!(r["transform"]["pass"], true);
    let psi = r["verification"]["integrability"]["max_psi"].as_f64().unwrap();
    assert!(psi > 0.0);
}

#[test]
fn verify_lambda_override_can_fail() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(dir.path(), "builtin:double-integrator");
    c.lambda = Some(5.0);
    assert_eq!(cmd_verify(&c).code, exit::FAIL);
    c.lambda = Some(-1.0);
    assert_eq!(cmd_verify(&c).code, exit::INPUT);
}

#[test]
fn timestamp_only_when_requested() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(dir.path(), "builtin:bounded-gain");
    c.timestamp = true;
    cmd_verify(&c);
    assert!(report(dir.path())["generated_unix"].as_u64().is_some());
}

#[test]
fn simulate_double_integrator_converges() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmd_simulate(&cfg(dir.path(), "builtin:double-integrator"));
    assert_eq!(o.code, exit::PASS, "{}", o.stderr);
    let r = report(dir.path());
    let rate = r["convergence"]["fitted_rate"].as_f64().unwrap();
    assert!(rate >= 0.95 * 0.5);
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,x1,x2,u1,V\n"));
    assert_eq!(csv.lines().count(), 10_002);
}

#[test]
fn simulate_counterexample_from_origin_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(dir.path(), "builtin:counterexample");
    c.x0 = Some(vec![0.0]);
    c.x_star = Some(vec![1.0]);
    c.u_star = Some(vec![1.0]);
    c.horizon = Some(1.0);
    let o = cmd_simulate(&c);
    assert_eq!(o.code, exit::INFEASIBLE, "{}", o.stderr);
    let f = &report(dir.path())["controller_failure"];
    assert_eq!(f["t"], 0.0);
    let node = f["node"][0].as_f64().unwrap();
    assert!(node.abs() < 0.1, "{node}");
}

#[test]
fn simulate_from_the_target_stays_on_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(dir.path(), "builtin:bounded-gain");
    c.x0 = Some(vec![0.7]);
    c.x_star = Some(vec![0.7]);
    c.u_star = Some(vec![0.7]);
    c.horizon = Some(2.0);
    assert_eq!(cmd_simulate(&c).code, exit::PASS);
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(v.abs() < 1e-20, "{line}");
    }
}

#[test]
fn simulate_rejects_bad_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(dir.path(), "builtin:double-integrator");
    c.x0 = Some(vec![1.0]);
    assert_eq!(cmd_simulate(&c).code, exit::INPUT);
    let mut c = cfg(dir.path(), "builtin:double-integrator");
    c.step = Some(0.0);
    assert_eq!(cmd_simulate(&c).code, exit::INPUT);
    let mut c = cfg(dir.path(), "builtin:double-integrator");
    c.segments = Some(0);
    assert_eq!(cmd_simulate(&c).code, exit::INPUT);
}

#[test]
fn demo_reproduces_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmd_demo_counterexample(&cfg(dir.path(), ""));
    assert_eq!(o.code, exit::PASS, "{}{}", o.stdout, o.stderr);
    for f in ["report.json", "counterexample.md", "psi_profile.csv", "open_loop_x0_0.csv", "open_loop_x0_1.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let md = fs::read_to_string(dir.path().join("counterexample.md")).unwrap();
    assert!(md.contains("4/|x1|^3"));
    assert!(!md.contains('\u{2014}'));
    assert_eq!(report(dir.path())["reproduced"], true);
}

#[test]
fn demo_with_large_lambda_names_the_failing_check() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(dir.path(), "");
    c.lambda = Some(1.5);
    let o = cmd_demo_counterexample(&c);
    assert_eq!(o.code, exit::FAIL);
    assert!(o.stderr.contains("first deviating check: contraction"), "{}", o.stderr);
    let r = report(dir.path());
    assert_eq!(r["verification"]["ccm"]["worst_margin"].as_f64().unwrap(), 1.0);
}

#[test]
fn demo_on_restricted_domain_bounds_psi() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(dir.path(), "");
    c.exclude_radius = Some(0.5);
    let o = cmd_demo_counterexample(&c);
    assert_eq!(o.code, exit::PASS, "{}", o.stderr);
    let r = report(dir.path());
    let psi = r["verification"]["integrability"]["max_psi"].as_f64().unwrap();
    assert!((psi - 32.0).abs() < 1e-9, "{psi}");
    assert_eq!(r["verification"]["domain"]["exclude_radius"].as_f64().unwrap(), 0.5);
    let md = fs::read_to_string(dir.path().join("counterexample.md")).unwrap();
    assert!(md.contains("|x1| < 0.5 removed"));
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_ccm"))
            .args(args)
            .arg("--out")
            .arg(dir.path())
            .output()
            .unwrap()
    };
    let o = run(&["verify", "--spec", "builtin:bounded-gain", "--threads", "1", "--no-timestamp"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("verdict: pass"));
    let o = run(&["verify", "--spec", "builtin:counterexample"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["verify", "--spec", "/nonexistent.json"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["verify", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[
        "simulate", "--spec", "builtin:counterexample", "--x0", "0", "--x-star", "1", "--u-star", "1", "--horizon", "1",
    ]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["simulate", "--spec", "builtin:double-integrator", "--x0=-1,0.5", "--horizon", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}
