//! Browser bindings. Each export takes plain values, runs one toolkit
//! operation and returns a JSON string; the `*_json` functions are the same
//! operations callable from Rust.

// `!(x >= 0.0)` style guards are there to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ccm_core::bundled;
use ccm_core::controller::ControllerConfig;
use ccm_core::model::Interval;
use ccm_core::simulator::{simulate_closed_loop, ConvergenceReport, SimError};
use ccm_core::verifier::{check_grid, verify, PowerLawFit, Tolerances, VerificationReport};
use ccm_core::Spec;

/// Plotting does not need every integrator step.
pub const MAX_PLOT_POINTS: usize = 1500;

/// `builtin:<name>` or a spec document.
fn load(spec: &str) -> Result<Spec, String> {
    match spec.trim().strip_prefix("builtin:") {
        Some(name) => bundled::by_name(name).ok_or_else(|| format!("no bundled spec named {name:?}")),
        None => Spec::from_json(spec).map_err(|e| e.to_string()),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct PsiSample {
    x: f64,
    /// None where no certificate exists.
    psi: Option<f64>,
}

#[derive(Serialize)]
struct PsiProfile {
    samples: Vec<PsiSample>,
    max_psi: f64,
    invalid_points: usize,
    blow_up: bool,
    growth: Option<PowerLawFit>,
}

/// psi across `[lo, hi]` for the scalar counterexample, with `|x| < exclude`
/// removed.
pub fn psi_profile_json(lo: f64, hi: f64, count: usize, exclude: f64) -> Result<String, String> {
    if !(lo < hi) || count < 2 || !(exclude >= 0.0) {
        return Err(format!("need lo < hi, count >= 2, exclude >= 0 (got {lo}, {hi}, {count}, {exclude})"));
    }
    let mut spec = bundled::counterexample();
    spec.grid.x = vec![Interval { lo, hi, count }];
    spec.grid.exclude_radius = exclude;
    if spec.grid.points().is_empty() {
        return Err("every sample lies inside the excluded band".into());
    }
    let tol = Tolerances::default();
    let samples = check_grid(&spec.system, &spec.metric, &spec.grid, &tol)
        .into_iter()
        .map(|r| r.map(|p| PsiSample { x: p.at.x[0], psi: p.psi }).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let report = verify(&spec.system, &spec.metric, &spec.grid, &tol);
    let c = report.integrability;
    to_json(&PsiProfile {
        samples,
        max_psi: c.max_psi,
        invalid_points: c.invalid_points,
        blow_up: c.blow_up,
        growth: c.growth,
    })
}

/// Full verification report; a finite `lambda` replaces the spec's rate.
pub fn verify_json(spec: &str, lambda: f64) -> Result<String, String> {
    let mut spec = load(spec)?;
    if lambda.is_finite() {
        spec.metric = spec.metric.with_lambda(lambda).map_err(|e| e.to_string())?;
    }
    let report: VerificationReport = verify(&spec.system, &spec.metric, &spec.grid, &Tolerances::default());
    to_json(&report)
}

#[derive(Serialize)]
struct SimulationView {
    t: Vec<f64>,
    x: Vec<Vec<f64>>,
    x_star: Vec<Vec<f64>>,
    v: Vec<f64>,
    report: Option<ConvergenceReport>,
    /// Set when the controller or integrator stopped the run.
    failure: Option<String>,
    failure_t: Option<f64>,
}

/// Tracking run from `x0`. An empty `x_star` or `u_star` falls back to the
/// spec scenario, then to zero.
pub fn simulate_json(
    spec: &str,
    x0: &[f64],
    x_star: &[f64],
    u_star: &[f64],
    horizon: f64,
    step: f64,
) -> Result<String, String> {
    let spec = load(spec)?;
    let n = spec.system.n();
    if x0.len() != n {
        return Err(format!("x0 has {} entries, n={n}", x0.len()));
    }
    if !(horizon > 0.0 && step > 0.0 && step <= horizon) {
        return Err(format!("need 0 < step <= horizon, got {step}, {horizon}"));
    }
    let m = spec.system.m();
    let pick_or = |given: &[f64], from_spec: Option<&Vec<f64>>, len: usize| match (given.is_empty(), from_spec) {
        (false, _) => given.to_vec(),
        (true, Some(v)) => v.clone(),
        (true, None) => vec![0.0; len],
    };
    let x_star = pick_or(x_star, spec.scenario.as_ref().map(|s| &s.x_star), n);
    let u_star = pick_or(u_star, spec.scenario.as_ref().map(|s| &s.u_star), m);
    if x_star.len() != n || u_star.len() != m {
        return Err(format!("target needs {n} states and {m} inputs"));
    }
    let cfg = ControllerConfig::new(spec.metric.lambda);
    let view = match simulate_closed_loop(&spec.system, &spec.metric, &cfg, &x_star, &u_star, x0, horizon, step) {
        Ok(run) => {
            let stride = run.trajectory.len().div_ceil(MAX_PLOT_POINTS).max(1);
            let pick = |v: &[Vec<f64>]| v.iter().step_by(stride).cloned().collect::<Vec<_>>();
            SimulationView {
                t: run.trajectory.times.iter().step_by(stride).copied().collect(),
                x: pick(&run.trajectory.states),
                x_star: pick(&run.target.states),
                v: run.report.v_series.iter().step_by(stride).copied().collect(),
                report: Some(run.report),
                failure: None,
                failure_t: None,
            }
        }
        Err(e) => {
            let t = match &e {
                SimError::NonFinite { t } | SimError::Model { t, .. } | SimError::Control { t, .. } => Some(*t),
                SimError::Config(_) => None,
            };
            SimulationView {
                t: Vec::new(),
                x: Vec::new(),
                x_star: Vec::new(),
                v: Vec::new(),
                report: None,
                failure: Some(e.to_string()),
                failure_t: t,
            }
        }
    };
    to_json(&view)
}

/// Names of the bundled specs, as a JSON array.
pub fn bundled_names_json() -> String {
    let names: Vec<&str> = bundled::ALL.iter().map(|(n, _)| *n).collect();
    serde_json::to_string(&names).unwrap_or_default()
}

#[wasm_bindgen]
pub fn psi_profile(lo: f64, hi: f64, count: usize, exclude: f64) -> Result<String, JsValue> {
    psi_profile_json(lo, hi, count, exclude).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn verify_spec(spec: &str, lambda: f64) -> Result<String, JsValue> {
    verify_json(spec, lambda).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn simulate(
    spec: &str,
    x0: Vec<f64>,
    x_star: Vec<f64>,
    u_star: Vec<f64>,
    horizon: f64,
    step: f64,
) -> Result<String, JsValue> {
    simulate_json(spec, &x0, &x_star, &u_star, horizon, step).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn bundled_names() -> String {
    bundled_names_json()
}
