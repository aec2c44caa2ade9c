//! Sontag-type differential controller and its integration along a path
//! from the target state to the actual state.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::differential::compute_ab;
use crate::linalg::to_vec;
use crate::model::{evaluate_raw, MetricSpec, ModelError, RawEval, SystemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControllerConfig {
    /// Target contraction rate; `alpha(V) = 2 lambda V`.
    pub lambda: f64,
    pub path_segments: usize,
    pub geodesic_iterations: usize,
    pub b_floor: f64,
    /// Compare the accumulated input against a sum over every other node.
    pub integrability_check: bool,
    /// Relative disagreement above which the path integral is rejected.
    pub integrability_tol: f64,
}

impl ControllerConfig {
    pub fn new(lambda: f64) -> Self {
        ControllerConfig {
            lambda,
            path_segments: 32,
            geodesic_iterations: 20,
            b_floor: 1e-12,
            integrability_check: true,
            integrability_tol: 0.25,
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(ControlError::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.path_segments == 0 {
            return Err(ControlError::Config("path_segments must be >= 1".into()));
        }
        if !(self.b_floor >= 0.0) {
            return Err(ControlError::Config(format!("b_floor must be >= 0, got {}", self.b_floor)));
        }
        if !(self.integrability_tol > 0.0) {
            return Err(ControlError::Config("integrability_tol must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("cannot decrease V: a = {a:e} >= 0 with b = {b:e} at or below the floor")]
pub struct RhoInfeasible {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("controller infeasible at x = {node:?}, t = {t}: {source}")]
    Infeasible {
        node: Vec<f64>,
        t: f64,
        #[source]
        source: RhoInfeasible,
    },
    /// Path integration does not settle under refinement: the differential
    /// law is not integrable along this path.
    #[error(
        "path integral of the differential law does not converge near x = {node:?}, t = {t} \
         (u with {} segments: {coarse:?}, with {segments}: {fine:?})",
        segments / 2
    )]
    NotIntegrable {
        node: Vec<f64>,
        t: f64,
        segments: usize,
        coarse: Vec<f64>,
        fine: Vec<f64>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid controller config: {0}")]
    Config(String),
}

/// `0` if `a < 0`, else `(a + sqrt(a^2 + b^2)) / b`.
pub fn rho(a: f64, b: f64, b_floor: f64) -> Result<f64, RhoInfeasible> {
    if a < 0.0 {
        return Ok(0.0);
    }
    if b <= b_floor {
        return Err(RhoInfeasible { a, b });
    }
    Ok((a + a.hypot(b)) / b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialStep {
    /// `a`, `b` for the unit tangent.
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub du: DVector<f64>,
}

/// `du = -rho B'M d`, with `rho` evaluated on `d / |d|`.
///
/// `rho` is invariant under scaling of `d`, so normalizing only makes
/// `b_floor` independent of the tangent length.
pub fn differential_feedback(
    raw: &RawEval,
    delta: &DVector<f64>,
    u: &[f64],
    lambda: f64,
    b_floor: f64,
) -> Result<DifferentialStep, RhoInfeasible> {
    let norm = delta.norm();
    if norm == 0.0 {
        return Ok(DifferentialStep {
            a: 0.0,
            b: 0.0,
            rho: 0.0,
            du: DVector::zeros(raw.m()),
        });
    }
    let (a, b) = compute_ab(raw, u, &(delta / norm), lambda);
    let r = rho(a, b, b_floor)?;
    let du = raw.b.transpose() * (&raw.m * delta) * -r;
    Ok(DifferentialStep { a, b, rho: r, du })
}

/// Nodes of a discretized path from `x_star` to `x` and its discrete energy
/// `sum_k dg' M(mid_k) dg / ds`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDiscretization {
    pub nodes: Vec<DVector<f64>>,
    pub energy: f64,
    /// Energy after the straight-line initialization and after each accepted round.
    pub energy_history: Vec<f64>,
}

fn path_energy(met: &MetricSpec, nodes: &[DVector<f64>], t: f64) -> Result<f64, ModelError> {
    let segments = (nodes.len() - 1) as f64;
    let constant = met.field.is_state_independent().then(|| met.eval(nodes[0].as_slice(), t)).transpose()?;
    let mut e = 0.0;
    for w in nodes.windows(2) {
        let d = &w[1] - &w[0];
        let m = match &constant {
            Some(m) => m.clone(),
            None => met.eval(((&w[0] + &w[1]) * 0.5).as_slice(), t)?,
        };
        e += d.dot(&(m * &d));
    }
    Ok(e * segments)
}

fn energy_gradient(met: &MetricSpec, nodes: &[DVector<f64>], t: f64) -> Result<Vec<DVector<f64>>, ModelError> {
    let n = nodes[0].len();
    let segments = (nodes.len() - 1) as f64;
    let mut grad = vec![DVector::zeros(n); nodes.len()];
    for k in 0..nodes.len() - 1 {
        let d = &nodes[k + 1] - &nodes[k];
        let mid = (&nodes[k] + &nodes[k + 1]) * 0.5;
        let m = met.eval(mid.as_slice(), t)?;
        let dm = met.field.eval_dx(mid.as_slice(), t)?;
        let md = (&m * &d) * (2.0 * segments);
        let half = DVector::from_iterator(n, dm.iter().map(|g| 0.5 * segments * d.dot(&(g * &d))));
        grad[k] += &half - &md;
        grad[k + 1] += &half + &md;
    }
    Ok(grad)
}

/// Straight line from `x_star` to `x`, refined by backtracking gradient
/// descent on the interior nodes when M depends on the state.
pub fn build_path(
    x_star: &[f64],
    x: &[f64],
    t: f64,
    met: &MetricSpec,
    cfg: &ControllerConfig,
) -> Result<PathDiscretization, ModelError> {
    let a = DVector::from_column_slice(x_star);
    let b = DVector::from_column_slice(x);
    if a == b {
        return Ok(PathDiscretization {
            nodes: vec![a],
            energy: 0.0,
            energy_history: vec![0.0],
        });
    }
    let segs = cfg.path_segments;
    let mut nodes: Vec<DVector<f64>> = (0..=segs)
        .map(|k| {
            let s = k as f64 / segs as f64;
            &a * (1.0 - s) + &b * s
        })
        .collect();
    nodes[segs] = b;
    let mut energy = path_energy(met, &nodes, t)?;
    let mut history = vec![energy];
    if segs < 2 || met.field.is_state_independent() {
        return Ok(PathDiscretization {
            nodes,
            energy,
            energy_history: history,
        });
    }
    let mut step = 1.0 / (4.0 * segs as f64 * met.alpha2);
    for _ in 0..cfg.geodesic_iterations {
        let grad = energy_gradient(met, &nodes, t)?;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = nodes.clone();
            for k in 1..segs {
                trial[k] -= &grad[k] * step;
            }
            match path_energy(met, &trial, t) {
                Ok(e) if e <= energy => {
                    nodes = trial;
                    energy = e;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
        history.push(energy);
        step *= 2.0;
    }
    Ok(PathDiscretization {
        nodes,
        energy,
        energy_history: history,
    })
}

fn subdivide(nodes: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(2 * nodes.len() - 1);
    for w in nodes.windows(2) {
        out.push(w[0].clone());
        out.push((&w[0] + &w[1]) * 0.5);
    }
    out.push(nodes[nodes.len() - 1].clone());
    out
}

/// Euler accumulation of `du` over every `stride`-th node, with `raws[k]`
/// evaluated at `nodes[k]`. Also returns the node where the largest single
/// increment occurred.
fn accumulate(
    raws: &[RawEval],
    nodes: &[DVector<f64>],
    stride: usize,
    u_star: &[f64],
    t: f64,
    cfg: &ControllerConfig,
) -> Result<(DVector<f64>, usize), ControlError> {
    let mut u = DVector::from_column_slice(u_star);
    let mut worst = (0.0, 0);
    let segments = (nodes.len() - 1) / stride;
    for k in (0..nodes.len() - 1).step_by(stride) {
        let delta = &nodes[k + stride] - &nodes[k];
        let step = differential_feedback(&raws[k], &delta, u.as_slice(), cfg.lambda, cfg.b_floor).map_err(|source| {
            ControlError::Infeasible {
                node: to_vec(&nodes[k]),
                t,
                source,
            }
        })?;
        let size = step.du.norm();
        if size > worst.0 {
            worst = (size, k);
        }
        u += step.du;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(ControlError::NotIntegrable {
                node: to_vec(&nodes[k]),
                t,
                segments,
                coarse: to_vec(&u),
                fine: to_vec(&u),
            });
        }
    }
    Ok((u, worst.1))
}

/// Realized feedback: `u_star` plus the differential law integrated along a
/// path from `x_star` to `x`. Returns `u_star` unchanged when `x == x_star`.
pub fn tracking_feedback(
    sys: &SystemSpec,
    met: &MetricSpec,
    x: &[f64],
    x_star: &[f64],
    u_star: &[f64],
    t: f64,
    cfg: &ControllerConfig,
) -> Result<Vec<f64>, ControlError> {
    if x == x_star {
        return Ok(u_star.to_vec());
    }
    let path = build_path(x_star, x, t, met, cfg)?;
    // the check compares against every other node, so it needs an even count
    let nodes = if cfg.integrability_check && cfg.path_segments % 2 == 1 {
        subdivide(&path.nodes)
    } else {
        path.nodes
    };
    let raws = nodes[..nodes.len() - 1]
        .iter()
        .map(|p| evaluate_raw(sys, met, p.as_slice(), t))
        .collect::<Result<Vec<_>, _>>()?;
    let (fine, worst) = accumulate(&raws, &nodes, 1, u_star, t, cfg)?;
    if cfg.integrability_check {
        let (coarse, _) = accumulate(&raws, &nodes, 2, u_star, t, cfg)?;
        if (&coarse - &fine).norm() > cfg.integrability_tol * (1.0 + fine.norm()) {
            return Err(ControlError::NotIntegrable {
                node: to_vec(&nodes[worst]),
                t,
                segments: nodes.len() - 1,
                coarse: to_vec(&coarse),
                fine: to_vec(&fine),
            });
        }
    }
    Ok(to_vec(&fine))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::differential::vdot;
    use crate::expr::parse;
    use crate::linalg::quad;
    use crate::model::SymmetricField;

    fn raw_ce(x: f64) -> RawEval {
        let s = bundled::counterexample();
        evaluate_raw(&s.system, &s.metric, &[x], 0.0).unwrap()
    }

    fn d1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn rho_values() {
        assert_eq!(rho(-1.0, 0.0, 1e-12), Ok(0.0));
        assert_eq!(rho(3.0, 4.0, 1e-12), Ok(2.0));
        assert_eq!(rho(0.0, 2.0, 1e-12), Ok(1.0));
        assert_eq!(rho(0.5, 1e-13, 1e-12), Err(RhoInfeasible { a: 0.5, b: 1e-13 }));
        assert_eq!(rho(0.0, 0.0, 1e-12), Err(RhoInfeasible { a: 0.0, b: 0.0 }));
    }

    #[test]
    fn rho_branch_identity() {
        for (a, b) in [(0.0, 1.0), (2.5, 0.3), (1e-9, 1.0), (7.0, 100.0)] {
            let r = rho(a, b, 1e-12).unwrap();
            assert!((r * b - a - a.hypot(b)).abs() < 1e-12 * (1.0 + a.abs() + b));
            assert!(r >= 0.0);
        }
    }

    #[test]
    fn feedback_counterexample() {
        let s = differential_feedback(&raw_ce(1.0), &d1(1.0), &[1.0], 0.5, 1e-12).unwrap();
        assert_eq!(s.rho, 2.0);
        assert_eq!(s.du[0], -2.0);
        let v = vdot(&raw_ce(1.0), &[1.0], &d1(1.0), &s.du);
        assert_eq!(v, -2.0);

        let s = differential_feedback(&raw_ce(1.0), &d1(0.0), &[1.0], 0.5, 1e-12).unwrap();
        assert_eq!(s.du[0], 0.0);

        let raw = raw_ce(0.0);
        let s = differential_feedback(&raw, &d1(1.0), &[1.0], 0.5, 1e-12).unwrap();
        assert_eq!((s.a, s.rho, s.du[0]), (-1.0, 0.0, 0.0));
        assert_eq!(vdot(&raw, &[1.0], &d1(1.0), &s.du), -2.0);
    }

    #[test]
    fn feedback_scales_with_delta() {
        let raw = raw_ce(0.7);
        let one = differential_feedback(&raw, &d1(1.0), &[0.3], 0.5, 1e-12).unwrap();
        let small = differential_feedback(&raw, &d1(1e-3), &[0.3], 0.5, 1e-12).unwrap();
        assert_eq!(one.rho, small.rho);
        assert!((small.du[0] - 1e-3 * one.du[0]).abs() < 1e-15);
    }

    #[test]
    fn closed_differential_loop_decreases() {
        let raw = raw_ce(0.9);
        for u in [-2.0, 0.0, 1.0, 4.0] {
            for d in [-1.0, 0.3] {
                let delta = d1(d);
                let s = differential_feedback(&raw, &delta, &[u], 0.5, 1e-12).unwrap();
                let v = quad(&raw.m, &delta);
                assert!(vdot(&raw, &[u], &delta, &s.du) <= -2.0 * 0.5 * v + 1e-12);
            }
        }
    }

    fn diag_metric(entries: [&str; 2], a1: f64, a2: f64) -> MetricSpec {
        let upper = vec![
            vec![parse(entries[0]).unwrap(), parse("0").unwrap()],
            vec![parse(entries[1]).unwrap()],
        ];
        MetricSpec::new(SymmetricField::new(2, upper).unwrap(), a1, a2, 1.0).unwrap()
    }

    #[test]
    fn paths_for_constant_metrics() {
        let cfg = ControllerConfig::new(1.0);
        let met = diag_metric(["1", "1"], 1.0, 1.0);
        let p = build_path(&[0.5, 0.5], &[0.5, 0.5], 0.0, &met, &cfg).unwrap();
        assert_eq!(p.nodes.len(), 1);
        assert_eq!(p.energy, 0.0);

        let p = build_path(&[0.0, 0.0], &[1.0, 1.0], 0.0, &met, &cfg).unwrap();
        assert_eq!(p.nodes.len(), 33);
        assert!((p.nodes[16][0] - 0.5).abs() < 1e-15);

        let met = diag_metric(["1", "10"], 1.0, 10.0);
        let p = build_path(&[0.0, 0.0], &[1.0, 1.0], 0.0, &met, &cfg).unwrap();
        assert!((p.energy - 11.0).abs() < 1e-12);
        assert_eq!(p.nodes[0], DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(p.nodes[32], DVector::from_vec(vec![1.0, 1.0]));
    }

    #[test]
    fn refinement_lowers_energy_and_keeps_endpoints() {
        let cfg = ControllerConfig::new(1.0);
        let met = diag_metric(["1 + x2^2", "1"], 1.0, 5.0);
        let (a, b) = ([-1.0, 1.0], [1.0, 1.0]);
        let p = build_path(&a, &b, 0.0, &met, &cfg).unwrap();
        for w in p.energy_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(p.energy < p.energy_history[0]);
        assert_eq!(p.nodes[0].as_slice(), &a);
        assert_eq!(p.nodes[32].as_slice(), &b);
        assert!(p.energy >= met.alpha1 * 4.0);
        // the geodesic bends toward x2 = 0 where the metric is cheaper
        assert!(p.nodes[16][1] < 1.0);
    }

    #[test]
    fn tracking_at_target_returns_u_star() {
        let s = bundled::double_integrator();
        let cfg = ControllerConfig::new(0.5);
        let u = tracking_feedback(&s.system, &s.metric, &[0.3, -0.2], &[0.3, -0.2], &[0.7], 1.0, &cfg).unwrap();
        assert_eq!(u, vec![0.7]);
    }

    #[test]
    fn tracking_double_integrator_is_sontag_law() {
        let s = bundled::double_integrator();
        let cfg = ControllerConfig::new(0.5);
        let x = [0.8, -0.4];
        let u = tracking_feedback(&s.system, &s.metric, &x, &[0.0, 0.0], &[0.0], 0.0, &cfg).unwrap();
        // constant A, B, M: rho is constant along the straight path
        let raw = evaluate_raw(&s.system, &s.metric, &x, 0.0).unwrap();
        let e = DVector::from_column_slice(&x);
        let step = differential_feedback(&raw, &e, &[0.0], 0.5, 1e-12).unwrap();
        assert!((u[0] - step.du[0]).abs() < 1e-12);
    }

    #[test]
    fn tracking_counterexample_from_origin_rejected() {
        let s = bundled::counterexample();
        let cfg = ControllerConfig::new(0.5);
        let err = tracking_feedback(&s.system, &s.metric, &[0.0], &[1.0], &[1.0], 0.0, &cfg).unwrap_err();
        match err {
            ControlError::NotIntegrable { node, .. } | ControlError::Infeasible { node, .. } => {
                assert!(node[0].abs() < 0.1, "{node:?}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn tracking_counterexample_near_target_accepted() {
        let s = bundled::counterexample();
        let cfg = ControllerConfig::new(0.5);
        let u = tracking_feedback(&s.system, &s.metric, &[0.9], &[1.0], &[1.0], 0.0, &cfg).unwrap();
        assert!(u[0] > 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(ControllerConfig::new(0.5).validate().is_ok());
        let mut c = ControllerConfig::new(0.5);
        c.path_segments = 0;
        assert!(c.validate().is_err());
        assert!(ControllerConfig::new(-1.0).validate().is_err());
    }
}
