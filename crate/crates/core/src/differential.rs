//! Differential-dynamics quantities at a point: the generalized Jacobian A,
//! the flow derivative of M, the input-coupling matrices H_i, Q = M B B' M,
//! and the scalars a and b used by the differential controller.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{quad, symmetrize};
use crate::model::RawEval;

/// `A = df/dx + sum_i (db_i/dx) u_i`, summed over the m input columns.
pub fn compute_a(raw: &RawEval, u: &[f64]) -> DMatrix<f64> {
    let mut a = raw.df_dx.clone();
    for (jac, &ui) in raw.db_dx.iter().zip(u) {
        if ui != 0.0 {
            a += jac * ui;
        }
    }
    a
}

/// `dM/dt + sum_k (dM/dx_k) (f + B u)_k`.
pub fn compute_mdot(raw: &RawEval, u: &[f64]) -> DMatrix<f64> {
    let xdot = &raw.f + &raw.b * DVector::from_column_slice(u);
    &raw.dm_dt + raw.dm_along(&xdot)
}

/// `H_i = d_{b_i} M + (db_i/dx)' M + M (db_i/dx)` for each input column,
/// symmetrized after assembly.
pub fn compute_h(raw: &RawEval) -> Vec<DMatrix<f64>> {
    raw.db_dx
        .iter()
        .enumerate()
        .map(|(i, jac)| {
            let bi = raw.b.column(i).into_owned();
            let h = raw.dm_along(&bi) + jac.transpose() * &raw.m + &raw.m * jac;
            symmetrize(&h)
        })
        .collect()
}

/// `Q = M B B' M`.
pub fn compute_q(raw: &RawEval) -> DMatrix<f64> {
    let mb = &raw.m * &raw.b;
    symmetrize(&(&mb * mb.transpose()))
}

/// The quadratic-form matrix `Mdot + A'M + MA + 2 lambda M` at input `u`.
pub fn contraction_form(raw: &RawEval, u: &[f64], lambda: f64) -> DMatrix<f64> {
    let a = compute_a(raw, u);
    let ma = &raw.m * &a;
    compute_mdot(raw, u) + ma.transpose() + ma + &raw.m * (2.0 * lambda)
}

/// `a = d'(Mdot + A'M + MA + 2 lambda M) d` and `b = 4 d'Q d`.
///
/// `a` is `dV/dt + dV/dx (f + Bu) + dV/dd A d + alpha(V)` with `alpha(V) = 2 lambda V`;
/// `b` is `(dV/dd) B B' (dV/dd)'` with `dV/dd = 2 d'M`.
pub fn compute_ab(raw: &RawEval, u: &[f64], delta: &DVector<f64>, lambda: f64) -> (f64, f64) {
    // matrix-vector form of quad(contraction_form(..), delta)
    let md = &raw.m * delta;
    let mut ad = &raw.df_dx * delta;
    for (jac, &ui) in raw.db_dx.iter().zip(u) {
        if ui != 0.0 {
            ad += (jac * delta) * ui;
        }
    }
    let xdot = &raw.f + &raw.b * DVector::from_column_slice(u);
    let mut mdot = quad(&raw.dm_dt, delta);
    for (dm, v) in raw.dm_dx.iter().zip(xdot.iter()) {
        if *v != 0.0 {
            mdot += v * quad(dm, delta);
        }
    }
    let a = mdot + 2.0 * md.dot(&ad) + 2.0 * lambda * delta.dot(&md);
    let btm = raw.b.transpose() * md;
    (a, 4.0 * btm.norm_squared())
}

/// All differential quantities at one `(x, u, t, delta)`.
#[derive(Debug, Clone)]
pub struct DifferentialData {
    pub a_matrix: DMatrix<f64>,
    pub mdot: DMatrix<f64>,
    pub v: f64,
    pub h: Vec<DMatrix<f64>>,
    pub q: DMatrix<f64>,
    pub a: f64,
    pub b: f64,
}

impl DifferentialData {
    pub fn compute(raw: &RawEval, u: &[f64], delta: &DVector<f64>, lambda: f64) -> Self {
        let (a, b) = compute_ab(raw, u, delta, lambda);
        DifferentialData {
            a_matrix: compute_a(raw, u),
            mdot: compute_mdot(raw, u),
            v: quad(&raw.m, delta),
            h: compute_h(raw),
            q: compute_q(raw),
            a,
            b,
        }
    }
}

/// `V_dot = d'(Mdot + A'M + MA) d + 2 d'M B du` for the differential closed loop.
pub fn vdot(raw: &RawEval, u: &[f64], delta: &DVector<f64>, du: &DVector<f64>) -> f64 {
    let form = contraction_form(raw, u, 0.0);
    quad(&form, delta) + 2.0 * (&raw.m * delta).dot(&(&raw.b * du))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::expr::parse;
    use crate::model::{evaluate_raw, MetricSpec, SymmetricField, SystemSpec};

    fn raw_ce(x: f64) -> RawEval {
        let s = bundled::counterexample();
        evaluate_raw(&s.system, &s.metric, &[x], 0.0).unwrap()
    }

    fn system(n: usize, f: &[&str], b: &[&[&str]]) -> SystemSpec {
        SystemSpec::new(
            n,
            b[0].len(),
            f.iter().map(|s| parse(s).unwrap()).collect(),
            b.iter().map(|r| r.iter().map(|s| parse(s).unwrap()).collect()).collect(),
        )
        .unwrap()
    }

    fn metric(n: usize, upper: &[&[&str]]) -> MetricSpec {
        let upper = upper.iter().map(|r| r.iter().map(|s| parse(s).unwrap()).collect()).collect();
        MetricSpec::new(SymmetricField::new(n, upper).unwrap(), 0.1, 10.0, 1.0).unwrap()
    }

    fn d1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn a_matrix_counterexample() {
        assert_eq!(compute_a(&raw_ce(1.0), &[1.0])[(0, 0)], 1.0);
        for x in [-2.0, 0.0, 0.7] {
            assert_eq!(compute_a(&raw_ce(x), &[0.0])[(0, 0)], -1.0);
        }
        let s = bundled::double_integrator();
        let raw = evaluate_raw(&s.system, &s.metric, &[0.3, 0.1], 0.0).unwrap();
        assert_eq!(compute_a(&raw, &[5.0]), DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn mdot_cases() {
        assert_eq!(compute_mdot(&raw_ce(1.3), &[2.0])[(0, 0)], 0.0);

        let sys = system(2, &["x2", "0"], &[&["0"], &["1"]]);
        let met = metric(2, &[&["1", "0"], &["1 + x1^2"]]);
        let raw = evaluate_raw(&sys, &met, &[0.5, -1.5], 0.0).unwrap();
        let md = compute_mdot(&raw, &[0.3]);
        assert_eq!(md, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0 * 0.5 * -1.5]));

        let sys = system(1, &["0"], &[&["0"]]);
        let met = metric(1, &[&["1 + 0.1*sin(t)"]]);
        let t = 0.8;
        let raw = evaluate_raw(&sys, &met, &[0.2], t).unwrap();
        assert!((compute_mdot(&raw, &[0.0])[(0, 0)] - 0.1 * t.cos()).abs() < 1e-15);
    }

    #[test]
    fn h_counterexample_is_4x() {
        for x in [-1.5, 0.0, 0.25, 2.0] {
            let h = compute_h(&raw_ce(x));
            assert_eq!(h.len(), 1);
            assert!((h[0][(0, 0)] - 4.0 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn h_vanishes_for_constant_input_and_metric() {
        let s = bundled::double_integrator();
        let raw = evaluate_raw(&s.system, &s.metric, &[1.0, 2.0], 0.0).unwrap();
        assert_eq!(compute_h(&raw)[0], DMatrix::zeros(2, 2));
    }

    #[test]
    fn q_values() {
        assert_eq!(compute_q(&raw_ce(1.0))[(0, 0)], 1.0);
        assert_eq!(compute_q(&raw_ce(0.0))[(0, 0)], 0.0);
        let sys = system(2, &["x2", "0"], &[&["0"], &["1"]]);
        let met = metric(2, &[&["1", "0"], &["1"]]);
        let raw = evaluate_raw(&sys, &met, &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(compute_q(&raw), DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn ab_counterexample() {
        for u in [-3.0, 0.0, 5.0] {
            assert_eq!(compute_ab(&raw_ce(0.0), &[u], &d1(1.0), 0.5), (-1.0, 0.0));
        }
        assert_eq!(compute_ab(&raw_ce(1.0), &[1.0], &d1(1.0), 0.5), (3.0, 4.0));
        assert_eq!(compute_ab(&raw_ce(1.0), &[1.0], &d1(0.0), 0.5), (0.0, 0.0));
    }

    #[test]
    fn a_matches_matrix_form() {
        let sys = system(2, &["x2*sin(x1)", "-x1^3"], &[&["x1", "1"], &["1", "x2^2"]]);
        let met = metric(2, &[&["2 + x1^2", "0.3*x2"], &["1 + 0.5*cos(t)"]]);
        let raw = evaluate_raw(&sys, &met, &[0.4, -0.9], 0.7).unwrap();
        let d = DVector::from_vec(vec![0.6, -1.3]);
        let u = [0.8, -2.0];
        let (a, _) = compute_ab(&raw, &u, &d, 0.4);
        let direct = quad(&contraction_form(&raw, &u, 0.4), &d);
        assert!((a - direct).abs() < 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn b_equals_four_delta_q_delta() {
        let raw = raw_ce(0.8);
        let d = d1(-0.6);
        let (_, b) = compute_ab(&raw, &[0.4], &d, 0.5);
        assert!((b - 4.0 * quad(&compute_q(&raw), &d)).abs() < 1e-14);
    }

    #[test]
    fn data_bundle() {
        let data = DifferentialData::compute(&raw_ce(1.0), &[1.0], &d1(1.0), 0.5);
        assert_eq!((data.a, data.b, data.v), (3.0, 4.0, 1.0));
        assert_eq!(data.a_matrix[(0, 0)], 1.0);
    }
}
