//! Numerical probes of the dual (W = M^-1, eta = M d) form of the
//! integrability condition and of its behaviour under affine feedback
//! `u = alpha(x) + beta(x) v`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::differential::{compute_h, compute_q, contraction_form};
use crate::expr::{Bindings, Expr};
use crate::linalg::{quad, sym_eig_range};
use crate::model::{evaluate_raw, GridPoint, GridSpec, MetricSpec, ModelError, RawEval, SystemSpec, TransformSpec};
use crate::verifier::{check_ccm_point, construct_psi, Tolerances};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformError {
    #[error("beta is singular at x = {at:?} (|det| = {det:e})")]
    Singular { at: Vec<f64>, det: f64 },
    #[error("candidate {index} is infeasible (residual {residual:e})")]
    InfeasibleInput { index: usize, residual: f64 },
    #[error("dual candidates disagree in shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Dual metric at one point: `W`, its state derivatives `dW/dx_k`, and a
/// dual tangent `eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPoint {
    pub w: DMatrix<f64>,
    pub dw: Vec<DMatrix<f64>>,
    pub eta: DVector<f64>,
}

impl DualPoint {
    /// `W = M^-1`, `dW_k = -W dM_k W`, `eta = M d`.
    pub fn from_primal(raw: &RawEval, delta: &DVector<f64>) -> Option<Self> {
        let w = raw.m.clone().try_inverse()?;
        let dw = raw.dm_dx.iter().map(|dm| -(&w * dm * &w)).collect();
        Some(DualPoint {
            w,
            dw,
            eta: &raw.m * delta,
        })
    }
}

fn dual_lhs(w: &DMatrix<f64>, dw: &[DMatrix<f64>], eta: &DVector<f64>, raw: &RawEval, i: usize) -> f64 {
    let jac = &raw.db_dx[i];
    let bi = raw.b.column(i);
    let mut dbw = DMatrix::zeros(w.nrows(), w.ncols());
    for (k, dwk) in dw.iter().enumerate() {
        dbw += dwk * bi[k];
    }
    let g = w * jac.transpose() + jac * w - dbw;
    quad(&g, eta)
}

/// `max_i |eta'(W J_i' + J_i W - d_{b_i} W) eta| - psi eta'BB'eta`, where
/// `J_i = db_i/dx`. Non-positive means the dual constraint holds.
pub fn dual_constraint_residual(dp: &DualPoint, raw: &RawEval, psi: f64) -> f64 {
    let rhs = psi * (raw.b.transpose() * &dp.eta).norm_squared();
    (0..raw.m())
        .map(|i| dual_lhs(&dp.w, &dp.dw, &dp.eta, raw, i).abs() - rhs)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// First term of the dual residual for input column `i`; affine in `(W, dW)`.
pub fn dual_constraint_term(dp: &DualPoint, raw: &RawEval, i: usize) -> f64 {
    dual_lhs(&dp.w, &dp.dw, &dp.eta, raw, i)
}

/// A dual metric candidate sampled at a set of points, with one psi.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCandidate {
    pub w: Vec<DMatrix<f64>>,
    pub dw: Vec<Vec<DMatrix<f64>>>,
    pub psi: f64,
}

impl DualCandidate {
    fn combine(&self, other: &DualCandidate, theta: f64) -> DualCandidate {
        let mix = |a: &DMatrix<f64>, b: &DMatrix<f64>| a * theta + b * (1.0 - theta);
        DualCandidate {
            w: self.w.iter().zip(&other.w).map(|(a, b)| mix(a, b)).collect(),
            dw: self
                .dw
                .iter()
                .zip(&other.dw)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| mix(x, y)).collect())
                .collect(),
            psi: theta * self.psi + (1.0 - theta) * other.psi,
        }
    }

    /// Worst residual over the points and the dual directions.
    pub fn worst_residual(&self, raws: &[RawEval], etas: &[DVector<f64>]) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for (p, raw) in raws.iter().enumerate() {
            for eta in etas {
                let dp = DualPoint {
                    w: self.w[p].clone(),
                    dw: self.dw[p].clone(),
                    eta: eta.clone(),
                };
                worst = worst.max(dual_constraint_residual(&dp, raw, self.psi));
            }
        }
        worst
    }
}

pub const CONVEXITY_THETAS: [f64; 3] = [0.25, 0.5, 0.75];
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub combinations: usize,
    pub worst_residual: f64,
    pub feasible: bool,
}

/// Checks that convex combinations of two feasible `(W, psi)` candidates
/// stay feasible at every sample point and dual direction.
pub fn convexity_probe(
    raws: &[RawEval],
    etas: &[DVector<f64>],
    first: &DualCandidate,
    second: &DualCandidate,
) -> Result<ConvexityReport, TransformError> {
    for c in [first, second] {
        if c.w.len() != raws.len() || c.dw.len() != raws.len() {
            return Err(TransformError::Shape(format!(
                "{} points, candidate has {}",
                raws.len(),
                c.w.len()
            )));
        }
    }
    for (index, c) in [first, second].into_iter().enumerate() {
        let residual = c.worst_residual(raws, etas);
        if residual > FEASIBILITY_TOL {
            return Err(TransformError::InfeasibleInput { index, residual });
        }
    }
    let mut worst = f64::NEG_INFINITY;
    for theta in CONVEXITY_THETAS {
        worst = worst.max(first.combine(second, theta).worst_residual(raws, etas));
    }
    Ok(ConvexityReport {
        combinations: CONVEXITY_THETAS.len(),
        worst_residual: worst,
        feasible: worst <= FEASIBILITY_TOL,
    })
}

/// `(kappa, gamma)` for a constant-at-a-point `beta`: kappa is the largest
/// column l1 norm, which bounds `|g beta|_inf <= kappa |g|_inf` for a row `g`;
/// gamma is the smallest eigenvalue of `beta beta'`.
pub fn feedback_constants(beta: &DMatrix<f64>) -> (f64, f64) {
    let kappa = beta
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let (gamma, _) = sym_eig_range(&(beta * beta.transpose()));
    (kappa, gamma)
}

pub const SINGULAR_DET: f64 = 1e-12;

/// Feedback `u = alpha(x) + beta(x) v`.
#[derive(Debug, Clone)]
pub struct FeedbackTransform {
    pub alpha: Vec<Expr>,
    pub beta: Vec<Vec<Expr>>,
}

impl From<TransformSpec> for FeedbackTransform {
    fn from(t: TransformSpec) -> Self {
        FeedbackTransform {
            alpha: t.alpha,
            beta: t.beta,
        }
    }
}

impl FeedbackTransform {
    pub fn eval_beta(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>, ModelError> {
        let m = self.beta.len();
        let b = Bindings::state(x, t);
        let mut out = DMatrix::zeros(m, m);
        for (i, row) in self.beta.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                out[(i, j)] = e.eval(&b).map_err(|source| ModelError {
                    entry: format!("beta[{i}][{j}]"),
                    source,
                })?;
            }
        }
        Ok(out)
    }

    pub fn is_state_independent(&self) -> bool {
        self.beta.iter().flatten().all(|e| e.vars().is_empty())
    }

    /// `(kappa, gamma)` at a point.
    pub fn constants(&self, x: &[f64], t: f64) -> Result<(f64, f64), ModelError> {
        Ok(feedback_constants(&self.eval_beta(x, t)?))
    }

    pub fn check_nonsingular(&self, grid: &GridSpec) -> Result<(), TransformError> {
        for p in grid.points() {
            let det = self.eval_beta(&p.x, p.t)?.determinant();
            if det.abs() <= SINGULAR_DET {
                return Err(TransformError::Singular { at: p.x, det });
            }
        }
        Ok(())
    }
}

/// Symbolic composition `f~ = f + B alpha`, `B~ = B beta`, after checking
/// that beta is nonsingular on the grid.
pub fn apply_feedback_transform(
    sys: &SystemSpec,
    tf: &FeedbackTransform,
    grid: &GridSpec,
) -> Result<SystemSpec, TransformError> {
    tf.check_nonsingular(grid)?;
    let b = sys.input_matrix();
    let m = sys.m();
    let f = sys
        .drift()
        .iter()
        .zip(b)
        .map(|(fr, brow)| {
            (0..m).fold(fr.clone(), |acc, i| Expr::add(acc, Expr::mul(brow[i].clone(), tf.alpha[i].clone())))
        })
        .collect();
    let bt = b
        .iter()
        .map(|brow| {
            (0..m)
                .map(|j| {
                    (0..m).fold(Expr::Const(0.0), |acc, i| {
                        Expr::add(acc, Expr::mul(brow[i].clone(), tf.beta[i][j].clone()))
                    })
                })
                .collect()
        })
        .collect();
    SystemSpec::new(sys.n(), m, f, bt).map_err(|e| TransformError::Shape(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariancePoint {
    pub at: GridPoint,
    pub kappa: f64,
    pub gamma: f64,
    pub psi: f64,
    pub psi_bar: f64,
    /// `min over d of psi_bar d'MB beta beta'B'M d - |beta' g|_inf`, `g_i = d'H_i d`.
    pub slack: f64,
    /// Largest mismatch between `beta' g` and a finite difference of the
    /// transformed system's `V_dot` in `v`.
    pub fd_discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub points: Vec<InvariancePoint>,
    /// Grid points without a valid psi certificate.
    pub skipped: usize,
    pub worst_slack: f64,
    pub max_fd_discrepancy: f64,
    pub pass: bool,
}

pub const INVARIANCE_SLACK: f64 = 1e-8;

/// Checks `|beta' g|_inf <= psi_bar d'MB beta beta'B'M d` with
/// `psi_bar = kappa psi / gamma` at every grid point and sampled direction.
///
/// The finite-difference cross-check differentiates the transformed system's
/// `V_dot` in `v`. It agrees with `beta' g` exactly only when beta does not
/// depend on the state; otherwise it includes `d beta / dx` terms.
pub fn invariance_probe(
    sys: &SystemSpec,
    met: &MetricSpec,
    tf: &FeedbackTransform,
    grid: &GridSpec,
    tol: &Tolerances,
) -> Result<InvarianceReport, TransformError> {
    let transformed = apply_feedback_transform(sys, tf, grid)?;
    let deltas = grid.delta_directions(sys.n());
    let m = sys.m();
    let fd_h = 1e-4;
    let mut points = Vec::new();
    let mut skipped = 0;
    for p in grid.points() {
        let raw = evaluate_raw(sys, met, &p.x, p.t)?;
        let h = compute_h(&raw);
        let cert = match construct_psi(&compute_q(&raw), &h, tol) {
            Ok(c) => c,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let beta = tf.eval_beta(&p.x, p.t)?;
        let (kappa, gamma) = feedback_constants(&beta);
        let psi_bar = kappa * cert.psi / gamma;
        let raw_t = evaluate_raw(&transformed, met, &p.x, p.t)?;
        let mbb = &raw.m * &raw.b * &beta;
        let mut slack = f64::INFINITY;
        let mut fd_discrepancy = 0.0f64;
        for d in &deltas {
            let g = DVector::from_iterator(m, h.iter().map(|hi| quad(hi, d)));
            let bg = beta.transpose() * &g;
            let rhs = psi_bar * (mbb.transpose() * d).norm_squared();
            slack = slack.min(rhs - bg.amax());
            for j in 0..m {
                let mut vp = vec![0.0; m];
                let mut vm = vec![0.0; m];
                vp[j] = fd_h;
                vm[j] = -fd_h;
                let fd = (quad(&contraction_form(&raw_t, &vp, 0.0), d) - quad(&contraction_form(&raw_t, &vm, 0.0), d))
                    / (2.0 * fd_h);
                fd_discrepancy = fd_discrepancy.max((fd - bg[j]).abs() / (1.0 + bg[j].abs()));
            }
        }
        points.push(InvariancePoint {
            at: p,
            kappa,
            gamma,
            psi: cert.psi,
            psi_bar,
            slack,
            fd_discrepancy,
        });
    }
    let worst_slack = points.iter().map(|p| p.slack).fold(f64::INFINITY, f64::min);
    let max_fd_discrepancy = points.iter().map(|p| p.fd_discrepancy).fold(0.0, f64::max);
    Ok(InvarianceReport {
        pass: !points.is_empty() && worst_slack >= -INVARIANCE_SLACK,
        points,
        skipped,
        worst_slack,
        max_fd_discrepancy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoherenceReport {
    pub compared: usize,
    pub kernel_dim_mismatches: usize,
    pub max_margin_difference: f64,
}

/// Compares kernel-restricted contraction margins of the original and the
/// feedback-transformed system under the same metric.
pub fn kernel_margin_coherence(
    sys: &SystemSpec,
    met: &MetricSpec,
    tf: &FeedbackTransform,
    grid: &GridSpec,
    tol: &Tolerances,
) -> Result<CoherenceReport, TransformError> {
    let transformed = apply_feedback_transform(sys, tf, grid)?;
    let mut report = CoherenceReport {
        compared: 0,
        kernel_dim_mismatches: 0,
        max_margin_difference: 0.0,
    };
    for p in grid.points() {
        let a = check_ccm_point(&evaluate_raw(sys, met, &p.x, p.t)?, met.lambda, tol);
        let b = check_ccm_point(&evaluate_raw(&transformed, met, &p.x, p.t)?, met.lambda, tol);
        if a.kernel.ncols() != b.kernel.ncols() {
            report.kernel_dim_mismatches += 1;
            continue;
        }
        if let (Some(ma), Some(mb)) = (a.margin, b.margin) {
            report.compared += 1;
            report.max_margin_difference = report.max_margin_difference.max((ma - mb).abs());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::expr::parse;
    use crate::model::Interval;

    fn raw_ce(x: f64) -> RawEval {
        let s = bundled::counterexample();
        evaluate_raw(&s.system, &s.metric, &[x], 0.0).unwrap()
    }

    fn exprs(v: &[&str]) -> Vec<Expr> {
        v.iter().map(|s| parse(s).unwrap()).collect()
    }

    #[test]
    fn dual_point_from_primal() {
        let s = bundled::double_integrator();
        let raw = evaluate_raw(&s.system, &s.metric, &[0.1, 0.2], 0.0).unwrap();
        let d = DVector::from_vec(vec![0.3, -1.0]);
        let dp = DualPoint::from_primal(&raw, &d).unwrap();
        assert!((&dp.w * &raw.m - DMatrix::identity(2, 2)).norm() < 1e-9);
        assert_eq!(dp.eta, &raw.m * &d);
    }

    #[test]
    fn dual_matches_primal_slack() {
        let raw = raw_ce(0.5);
        let d = DVector::from_element(1, 0.8);
        let dp = DualPoint::from_primal(&raw, &d).unwrap();
        for psi in [1.0, 32.0, 50.0] {
            let primal = quad(&compute_h(&raw)[0], &d).abs() - psi * quad(&compute_q(&raw), &d);
            let dual = dual_constraint_residual(&dp, &raw, psi);
            assert!((primal - dual).abs() < 1e-12 * (1.0 + primal.abs()));
        }
        assert!(dual_constraint_residual(&dp, &raw, 1.0) > 0.0);
        assert!(dual_constraint_residual(&dp, &raw, 32.0).abs() < 1e-12);
    }

    #[test]
    fn dual_residual_constant_input() {
        let s = bundled::double_integrator();
        let raw = evaluate_raw(&s.system, &s.metric, &[1.0, -1.0], 0.0).unwrap();
        let dp = DualPoint::from_primal(&raw, &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(dual_constraint_residual(&dp, &raw, 0.0), 0.0);
    }

    #[test]
    fn convexity_constant_w() {
        let s = bundled::double_integrator();
        let raws: Vec<RawEval> = [[0.0, 0.0], [1.0, -2.0]]
            .iter()
            .map(|x| evaluate_raw(&s.system, &s.metric, x, 0.0).unwrap())
            .collect();
        let etas = crate::model::unit_directions(2, 8, 3);
        let w1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let w2 = DMatrix::identity(2, 2);
        let cand = |w: &DMatrix<f64>| DualCandidate {
            w: vec![w.clone(); 2],
            dw: vec![vec![DMatrix::zeros(2, 2); 2]; 2],
            psi: 0.0,
        };
        let r = convexity_probe(&raws, &etas, &cand(&w1), &cand(&w2)).unwrap();
        assert!(r.feasible);
        assert_eq!(r.worst_residual, 0.0);
        let r = convexity_probe(&raws, &etas, &cand(&w1), &cand(&w1)).unwrap();
        assert!(r.feasible);
    }

    #[test]
    fn convexity_rejects_infeasible_input() {
        let raws = vec![raw_ce(0.5)];
        let etas = vec![DVector::from_element(1, 1.0)];
        let good = DualCandidate {
            w: vec![DMatrix::identity(1, 1)],
            dw: vec![vec![DMatrix::zeros(1, 1)]],
            psi: 40.0,
        };
        let bad = DualCandidate { psi: 1.0, ..good.clone() };
        assert!(matches!(
            convexity_probe(&raws, &etas, &good, &bad),
            Err(TransformError::InfeasibleInput { index: 1, .. })
        ));
    }

    #[test]
    fn constants() {
        assert_eq!(feedback_constants(&DMatrix::identity(2, 2)), (1.0, 1.0));
        let (k, g) = feedback_constants(&DMatrix::from_element(1, 1, 2.0));
        assert_eq!(k, 2.0);
        assert!((g - 4.0).abs() < 1e-15);
        let (k, g) = feedback_constants(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
        assert_eq!(k, 2.0);
        assert!((g - (3.0 - 5f64.sqrt()) / 2.0).abs() < 1e-12);
        // column sums, not row sums
        let (k, _) = feedback_constants(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 1.0]));
        assert_eq!(k, 4.0);
    }

    #[test]
    fn transform_composition() {
        let s = bundled::counterexample();
        let id = FeedbackTransform {
            alpha: exprs(&["0"]),
            beta: vec![exprs(&["1"])],
        };
        let t = apply_feedback_transform(&s.system, &id, &s.grid).unwrap();
        for x in [-1.0, 0.4] {
            assert_eq!(t.eval_f(&[x], 0.0).unwrap(), s.system.eval_f(&[x], 0.0).unwrap());
            assert_eq!(t.eval_b(&[x], 0.0).unwrap(), s.system.eval_b(&[x], 0.0).unwrap());
        }

        let two = FeedbackTransform {
            alpha: exprs(&["0"]),
            beta: vec![exprs(&["2"])],
        };
        let t = apply_feedback_transform(&s.system, &two, &s.grid).unwrap();
        assert_eq!(t.eval_b(&[1.5], 0.0).unwrap()[(0, 0)], 2.0 * 1.5 * 1.5);

        let di = bundled::double_integrator();
        let shift = FeedbackTransform {
            alpha: exprs(&["-x1"]),
            beta: vec![exprs(&["1"])],
        };
        let t = apply_feedback_transform(&di.system, &shift, &di.grid).unwrap();
        let f = t.eval_f(&[0.7, 0.2], 0.0).unwrap();
        assert_eq!(f.as_slice(), &[0.2, -0.7]);
    }

    #[test]
    fn singular_beta_rejected() {
        let s = bundled::counterexample();
        let tf = FeedbackTransform {
            alpha: exprs(&["0"]),
            beta: vec![exprs(&["x1"])],
        };
        assert!(matches!(
            apply_feedback_transform(&s.system, &tf, &s.grid),
            Err(TransformError::Singular { .. })
        ));
    }

    #[test]
    fn invariance_scalar_beta() {
        let s = bundled::bounded_gain();
        let tol = Tolerances::default();
        for beta in ["1", "2", "-0.5"] {
            let tf = FeedbackTransform {
                alpha: exprs(&["0"]),
                beta: vec![exprs(&[beta])],
            };
            let r = invariance_probe(&s.system, &s.metric, &tf, &s.grid, &tol).unwrap();
            assert!(r.pass, "beta={beta} slack={}", r.worst_slack);
            assert_eq!(r.skipped, 0);
            assert!(r.max_fd_discrepancy < 1e-6);
        }
        let tf = FeedbackTransform {
            alpha: exprs(&["0"]),
            beta: vec![exprs(&["2"])],
        };
        let r = invariance_probe(&s.system, &s.metric, &tf, &s.grid, &tol).unwrap();
        let p = &r.points[7];
        assert_eq!((p.kappa, p.gamma), (2.0, 4.0));
        assert!((p.psi_bar - p.psi / 2.0).abs() < 1e-15);
    }

    #[test]
    fn coherence_with_drift_shift() {
        let s = bundled::counterexample();
        let tf = FeedbackTransform {
            alpha: exprs(&["x1"]),
            beta: vec![exprs(&["3"])],
        };
        let mut grid = s.grid.clone();
        grid.x = vec![Interval { lo: -1.0, hi: 1.0, count: 21 }];
        let r = kernel_margin_coherence(&s.system, &s.metric, &tf, &grid, &Tolerances::default()).unwrap();
        assert_eq!(r.kernel_dim_mismatches, 0);
        assert_eq!(r.compared, 1);
        assert!(r.max_margin_difference < 1e-9);
    }
}
