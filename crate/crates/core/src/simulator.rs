//! Fixed-step RK4 integration, closed-loop tracking runs and convergence
//! measurements.

use std::io::{self, Write};

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::controller::{tracking_feedback, ControlError, ControllerConfig};
use crate::model::{MetricSpec, ModelError, SystemSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("state became non-finite at t = {t}")]
    NonFinite { t: f64 },
    #[error("model evaluation failed at t = {t}: {source}")]
    Model {
        t: f64,
        #[source]
        source: ModelError,
    },
    #[error("controller failed at t = {t}: {source}")]
    Control {
        t: f64,
        #[source]
        source: ControlError,
    },
    #[error("invalid simulation setup: {0}")]
    Config(String),
}

impl SimError {
    fn from_control(t: f64, e: ControlError) -> Self {
        match e {
            ControlError::Model(source) => SimError::Model { t, source },
            source => SimError::Control { t, source },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }
}

fn step_count(t0: f64, horizon: f64, h: f64) -> Result<usize, SimError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(SimError::Config(format!("step must be > 0, got {h}")));
    }
    if !(horizon > t0 && horizon.is_finite()) {
        return Err(SimError::Config(format!("horizon {horizon} must exceed start time {t0}")));
    }
    Ok(((horizon - t0) / h).round().max(1.0) as usize)
}

/// One classical RK4 step of `y' = rhs(t, y)`.
fn rk4_step<F>(rhs: &mut F, t: f64, y: &DVector<f64>, h: f64) -> Result<DVector<f64>, SimError>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>, SimError>,
{
    let k1 = rhs(t, y)?;
    rk4_finish(rhs, t, y, h, k1)
}

/// RK4 step with the first stage already evaluated.
fn rk4_finish<F>(rhs: &mut F, t: f64, y: &DVector<f64>, h: f64, k1: DVector<f64>) -> Result<DVector<f64>, SimError>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>, SimError>,
{
    let k2 = rhs(t + 0.5 * h, &(y + &k1 * (0.5 * h)))?;
    let k3 = rhs(t + 0.5 * h, &(y + &k2 * (0.5 * h)))?;
    let k4 = rhs(t + h, &(y + &k3 * h))?;
    let next = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFinite { t: t + h });
    }
    Ok(next)
}

/// Open-loop integration of `x' = f(x,t) + B(x,t) u(t, x)` from `t0` to
/// `horizon`; the control is evaluated at every RK4 stage.
pub fn integrate<C>(
    sys: &SystemSpec,
    control: C,
    x0: &[f64],
    t0: f64,
    horizon: f64,
    h: f64,
) -> Result<Trajectory, SimError>
where
    C: Fn(f64, &[f64]) -> Vec<f64>,
{
    if x0.len() != sys.n() {
        return Err(SimError::Config(format!("x0 has {} entries, n={}", x0.len(), sys.n())));
    }
    let steps = step_count(t0, horizon, h)?;
    let mut rhs = |t: f64, y: &DVector<f64>| {
        let u = control(t, y.as_slice());
        sys.vector_field(y.as_slice(), &u, t).map_err(|source| SimError::Model { t, source })
    };
    let mut traj = Trajectory::default();
    let mut y = DVector::from_column_slice(x0);
    for k in 0..=steps {
        let t = t0 + k as f64 * h;
        traj.times.push(t);
        traj.states.push(y.as_slice().to_vec());
        traj.inputs.push(control(t, y.as_slice()));
        if k < steps {
            y = rk4_step(&mut rhs, t, &y, h)?;
        }
    }
    Ok(traj)
}

/// Convergence measurements of a tracking run.
///
/// `v_series` is the displacement surrogate `e' M(x*, t) e`, not the
/// Riemannian energy; `observed_overshoot` is measured in the Euclidean norm
/// of the same displacement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub lambda: f64,
    /// Not serialized; the trajectory CSV carries it.
    #[serde(skip_serializing)]
    pub v_series: Vec<f64>,
    /// `-slope / 2` of `ln V` over the final 80% of the horizon; `None` when
    /// V is below the floor throughout that window.
    pub fitted_rate: Option<f64>,
    pub rate_status: &'static str,
    pub rate_pass: bool,
    pub observed_overshoot: Option<f64>,
    pub claimed_overshoot: f64,
    pub overshoot_pass: bool,
    /// `max V(t) / (V(0) e^{-2 lambda t})` for `t >= envelope_from`.
    pub envelope_ratio: f64,
    pub envelope_from: f64,
    pub envelope_pass: bool,
    /// Steps with `V_{k+1} > V_k e^{-2 lambda h} (1 + slack)`, first step excluded.
    pub step_decay_violations: usize,
    pub pass: bool,
}

pub const V_FLOOR: f64 = 1e-14;
pub const RATE_FRACTION: f64 = 0.95;
pub const OVERSHOOT_SLACK: f64 = 0.05;
pub const ENVELOPE_SLACK: f64 = 0.05;
pub const ENVELOPE_FROM: f64 = 0.5;

fn fit_rate(times: &[f64], v: &[f64]) -> Option<f64> {
    let t0 = times[0];
    let start = t0 + 0.2 * (times[times.len() - 1] - t0);
    let (xs, ys): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(v)
        .filter(|(t, v)| **t >= start && **v > V_FLOOR)
        .map(|(t, v)| (*t, v.ln()))
        .unzip();
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(-0.5 * sxy / sxx)
}

/// Rate, overshoot and envelope checks of `traj` against `target`.
pub fn convergence_metrics(
    traj: &Trajectory,
    target: &Trajectory,
    met: &MetricSpec,
    lambda: f64,
) -> Result<ConvergenceReport, ModelError> {
    let mut v_series = Vec::with_capacity(traj.len());
    let mut errors = Vec::with_capacity(traj.len());
    for k in 0..traj.len() {
        let e = DVector::from_column_slice(&traj.states[k]) - DVector::from_column_slice(&target.states[k]);
        let m = met.eval(&target.states[k], traj.times[k])?;
        v_series.push(e.dot(&(m * &e)).max(0.0));
        errors.push(e.norm());
    }
    let t0 = traj.times[0];
    let fitted_rate = fit_rate(&traj.times, &v_series);
    let rate_pass = fitted_rate.is_none_or(|r| r >= RATE_FRACTION * lambda);

    let e0 = errors[0];
    let observed_overshoot = (e0 > 0.0).then(|| {
        traj.times
            .iter()
            .zip(&errors)
            .map(|(t, e)| e * (lambda * (t - t0)).exp() / e0)
            .fold(0.0, f64::max)
    });
    let claimed_overshoot = met.overshoot();
    let overshoot_pass = observed_overshoot.is_none_or(|r| r <= claimed_overshoot * (1.0 + OVERSHOOT_SLACK));

    let v0 = v_series[0];
    let mut envelope_ratio = 0.0f64;
    for (t, v) in traj.times.iter().zip(&v_series) {
        if t - t0 >= ENVELOPE_FROM && v0 > 0.0 {
            envelope_ratio = envelope_ratio.max(v / (v0 * (-2.0 * lambda * (t - t0)).exp()));
        }
    }
    let envelope_pass = envelope_ratio <= 1.0 + ENVELOPE_SLACK;

    let mut step_decay_violations = 0;
    for k in 1..v_series.len().saturating_sub(1) {
        let h = traj.times[k + 1] - traj.times[k];
        if v_series[k] > V_FLOOR && v_series[k + 1] > v_series[k] * (-2.0 * lambda * h).exp() * (1.0 + ENVELOPE_SLACK) {
            step_decay_violations += 1;
        }
    }

    Ok(ConvergenceReport {
        lambda,
        v_series,
        fitted_rate,
        rate_status: if fitted_rate.is_some() { "fitted" } else { "converged" },
        rate_pass,
        observed_overshoot,
        claimed_overshoot,
        overshoot_pass,
        envelope_ratio,
        envelope_from: ENVELOPE_FROM,
        envelope_pass,
        step_decay_violations,
        pass: rate_pass && overshoot_pass && envelope_pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedLoopRun {
    pub trajectory: Trajectory,
    pub target: Trajectory,
    pub report: ConvergenceReport,
}

/// Tracks the target generated by holding `u_star` from `x_star0`. The plant
/// and target are integrated together so both see the same stage times.
#[allow(clippy::too_many_arguments)]
pub fn simulate_closed_loop(
    sys: &SystemSpec,
    met: &MetricSpec,
    cfg: &ControllerConfig,
    x_star0: &[f64],
    u_star: &[f64],
    x0: &[f64],
    horizon: f64,
    h: f64,
) -> Result<ClosedLoopRun, SimError> {
    let n = sys.n();
    if x0.len() != n || x_star0.len() != n {
        return Err(SimError::Config(format!("x0 and x_star must have {n} entries")));
    }
    if u_star.len() != sys.m() {
        return Err(SimError::Config(format!("u_star must have {} entries", sys.m())));
    }
    cfg.validate().map_err(|e| SimError::Config(e.to_string()))?;
    let steps = step_count(0.0, horizon, h)?;

    let feedback = |t: f64, y: &DVector<f64>| {
        let (x, xs) = y.as_slice().split_at(n);
        tracking_feedback(sys, met, x, xs, u_star, t, cfg).map_err(|e| SimError::from_control(t, e))
    };
    let field = |t: f64, y: &DVector<f64>, u: &[f64]| -> Result<DVector<f64>, SimError> {
        let (x, xs) = y.as_slice().split_at(n);
        let model = |source| SimError::Model { t, source };
        let dx = sys.vector_field(x, u, t).map_err(model)?;
        let dxs = sys.vector_field(xs, u_star, t).map_err(model)?;
        Ok(DVector::from_iterator(2 * n, dx.iter().chain(dxs.iter()).copied()))
    };
    let mut rhs = |t: f64, y: &DVector<f64>| field(t, y, &feedback(t, y)?);

    let mut traj = Trajectory::default();
    let mut target = Trajectory::default();
    let mut y = DVector::from_iterator(2 * n, x0.iter().chain(x_star0).copied());
    for k in 0..=steps {
        let t = k as f64 * h;
        let u = feedback(t, &y)?;
        let k1 = field(t, &y, &u)?;
        traj.times.push(t);
        traj.states.push(y.as_slice()[..n].to_vec());
        traj.inputs.push(u);
        target.times.push(t);
        target.states.push(y.as_slice()[n..].to_vec());
        target.inputs.push(u_star.to_vec());
        if k < steps {
            y = rk4_finish(&mut rhs, t, &y, h, k1)?;
        }
    }
    let report =
        convergence_metrics(&traj, &target, met, cfg.lambda).map_err(|source| SimError::Model { t: horizon, source })?;
    Ok(ClosedLoopRun {
        trajectory: traj,
        target,
        report,
    })
}

/// Writes `t,x1..xn,u1..um,V`; `v` may be empty, in which case the V column is blank.
pub fn write_csv<W: Write>(out: &mut W, traj: &Trajectory, v: &[f64]) -> io::Result<()> {
    let n = traj.states.first().map_or(0, Vec::len);
    let m = traj.inputs.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.push("V".into());
    writeln!(out, "{}", header.join(","))?;
    for k in 0..traj.len() {
        let mut row = vec![traj.times[k].to_string()];
        row.extend(traj.states[k].iter().map(f64::to_string));
        row.extend(traj.inputs[k].iter().map(f64::to_string));
        row.push(v.get(k).map_or(String::new(), f64::to_string));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
