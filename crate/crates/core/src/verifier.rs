//! Grid-based verification of the CCM condition, the orthogonality
//! implication, the integrability condition (through a constructive psi
//! certificate) and the strong conditions.
//!
//! Every check runs on a bounded sample of the state space. A pass is
//! evidence on that domain only; the report carries the domain descriptor.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::differential::{compute_h, compute_q, contraction_form};
use crate::linalg::{left_null_space, quad, sigma_max, sym_eigen_desc};
use crate::model::{
    check_metric_bounds, evaluate_raw, GridPoint, GridSpec, Interval, MetricBoundsReport, MetricSpec,
    ModelError, RawEval, SystemSpec,
};

/// Numerical thresholds used by the checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    /// Singular values of MB below `rank_rel * sigma_max` count as zero.
    pub rank_rel: f64,
    /// Eigenvalues of Q below `eig_rel * max(1, lambda_max(Q))` count as zero.
    pub eig_rel: f64,
    /// Orthogonality / residual slack, scaled by `1 + ||H_i||_F`.
    pub orth: f64,
    /// Strictness slack for the contraction margin, scaled by `1 + ||M||_F`.
    pub margin: f64,
    /// Certificate values above this are treated as blow-up.
    pub psi_cap: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rank_rel: 1e-9,
            eig_rel: 1e-8,
            orth: 1e-8,
            margin: 1e-7,
            psi_cap: 1e6,
        }
    }
}

/// Orthonormal basis (columns) of `{d : d'MB = 0}`.
pub fn kernel_basis(mb: &DMatrix<f64>, tol: &Tolerances) -> DMatrix<f64> {
    left_null_space(mb, tol.rank_rel)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrthogonalityCheck {
    pub residual: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Checks that every `H_i` vanishes as a quadratic form on the kernel:
/// residual `max_i ||N' H_i N||_F`.
pub fn check_orthogonality(h: &[DMatrix<f64>], kernel: &DMatrix<f64>, tol: &Tolerances) -> OrthogonalityCheck {
    let mut out = OrthogonalityCheck {
        residual: 0.0,
        bound: f64::INFINITY,
        pass: true,
    };
    if kernel.ncols() == 0 {
        return out;
    }
    for hi in h {
        let r = (kernel.transpose() * hi * kernel).norm();
        let bound = tol.orth * (1.0 + hi.norm());
        out.residual = out.residual.max(r);
        out.bound = out.bound.min(bound);
        if r > bound {
            out.pass = false;
        }
    }
    out
}

/// Contraction margin on the kernel of `(MB)'` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct CcmPoint {
    pub kernel: DMatrix<f64>,
    /// `None` when the kernel is trivial and the condition holds vacuously.
    pub margin: Option<f64>,
    pub threshold: f64,
}

impl CcmPoint {
    pub fn pass(&self) -> bool {
        self.margin.is_none_or(|m| m < -self.threshold)
    }
}

fn kernel_margin(form: &DMatrix<f64>, kernel: &DMatrix<f64>) -> Option<f64> {
    if kernel.ncols() == 0 {
        return None;
    }
    let restricted = kernel.transpose() * form * kernel;
    Some(sym_eigen_desc(&((&restricted + restricted.transpose()) * 0.5)).0[0])
}

/// Largest eigenvalue of `N'(Mdot + A'M + MA + 2 lambda M)N` with the input
/// terms dropped (u = 0). Valid once the orthogonality check has passed.
pub fn check_ccm_point(raw: &RawEval, lambda: f64, tol: &Tolerances) -> CcmPoint {
    let kernel = kernel_basis(&(&raw.m * &raw.b), tol);
    let zero = vec![0.0; raw.m()];
    let margin = kernel_margin(&contraction_form(raw, &zero, lambda), &kernel);
    CcmPoint {
        kernel,
        margin,
        threshold: tol.margin * (1.0 + raw.m.norm()),
    }
}

/// Constructive integrability certificate `psi = max_i sigma_max(H~_i) / d_r`
/// from the eigendecomposition `Q = V~ D~ V~'`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiCertificate {
    pub vtilde: DMatrix<f64>,
    pub dtilde: Vec<f64>,
    pub htilde: Vec<DMatrix<f64>>,
    pub psi: f64,
    pub residual: f64,
}

impl PsiCertificate {
    pub fn rank(&self) -> usize {
        self.dtilde.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum CertificateError {
    /// Some `H_i` has a component outside the range of Q, so no finite psi
    /// satisfies the bound at this point.
    #[error("no psi certificate: H has residual {residual:e} outside range(Q) (bound {bound:e})")]
    Invalid { residual: f64, bound: f64, rank: usize },
}

pub fn construct_psi(q: &DMatrix<f64>, h: &[DMatrix<f64>], tol: &Tolerances) -> Result<PsiCertificate, CertificateError> {
    let n = q.nrows();
    let (values, vectors) = sym_eigen_desc(q);
    let lmax = values.first().copied().unwrap_or(0.0);
    let threshold = tol.eig_rel * lmax.max(1.0);
    let r = values.iter().take_while(|&&v| v > threshold).count();
    let vtilde = vectors.columns(0, r).into_owned();
    let dtilde: Vec<f64> = values[..r].to_vec();

    let mut htilde = Vec::with_capacity(h.len());
    let mut residual = 0.0f64;
    let mut sigma = 0.0f64;
    for hi in h {
        let ht = vtilde.transpose() * hi * &vtilde;
        let rebuilt = &vtilde * &ht * vtilde.transpose();
        let res = (hi - rebuilt).norm();
        let bound = tol.orth * (1.0 + hi.norm());
        if res > bound {
            return Err(CertificateError::Invalid {
                residual: res,
                bound,
                rank: r,
            });
        }
        residual = residual.max(res);
        sigma = sigma.max(sigma_max(&ht));
        htilde.push(ht);
    }
    let psi = if r == 0 || sigma == 0.0 { 0.0 } else { sigma / dtilde[r - 1] };
    debug_assert_eq!(vtilde.nrows(), n);
    Ok(PsiCertificate {
        vtilde,
        dtilde,
        htilde,
        psi,
        residual,
    })
}

/// Per-grid-point outcome of every check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointResult {
    pub at: GridPoint,
    pub kernel_dim: usize,
    pub margin: Option<f64>,
    pub margin_threshold: f64,
    /// Kernel margin maximized over the grid's input samples with full A(u), Mdot(u).
    pub u_sweep_margin: Option<f64>,
    pub orthogonality: OrthogonalityCheck,
    pub q_rank: usize,
    pub psi: Option<f64>,
    pub certificate_residual: f64,
    pub h_norm_max: f64,
    /// `min over deltas, i of psi d'Qd - |d'H_i d|`.
    pub inequality_slack: Option<f64>,
    pub ccm_pass: bool,
}

pub fn check_point(
    sys: &SystemSpec,
    met: &MetricSpec,
    at: &GridPoint,
    inputs: &[Vec<f64>],
    deltas: &[DVector<f64>],
    tol: &Tolerances,
) -> Result<PointResult, ModelError> {
    let raw = evaluate_raw(sys, met, &at.x, at.t)?;
    let h = compute_h(&raw);
    let q = compute_q(&raw);
    let ccm = check_ccm_point(&raw, met.lambda, tol);
    let orthogonality = check_orthogonality(&h, &ccm.kernel, tol);
    let u_sweep_margin = inputs
        .iter()
        .filter_map(|u| kernel_margin(&contraction_form(&raw, u, met.lambda), &ccm.kernel))
        .reduce(f64::max);
    let h_norm_max = h.iter().map(|m| m.norm()).fold(0.0, f64::max);

    let (psi, certificate_residual, inequality_slack, q_rank) = match construct_psi(&q, &h, tol) {
        Ok(cert) => {
            let slack = deltas
                .iter()
                .flat_map(|d| {
                    let qd = quad(&q, d);
                    h.iter().map(move |hi| cert.psi * qd - quad(hi, d).abs())
                })
                .reduce(f64::min);
            (Some(cert.psi), cert.residual, slack, cert.rank())
        }
        Err(CertificateError::Invalid { residual, rank, .. }) => (None, residual, None, rank),
    };
    Ok(PointResult {
        at: at.clone(),
        kernel_dim: ccm.kernel.ncols(),
        margin: ccm.margin,
        margin_threshold: ccm.threshold,
        u_sweep_margin,
        orthogonality,
        q_rank,
        psi,
        certificate_residual,
        h_norm_max,
        inequality_slack,
        ccm_pass: orthogonality.pass && ccm.pass(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainDescriptor {
    pub x: Vec<Interval>,
    pub exclude_radius: f64,
    pub t: Vec<f64>,
    pub u_samples: usize,
    pub delta_samples: usize,
    pub seed: u64,
    pub points: usize,
    pub scope: String,
}

impl DomainDescriptor {
    fn new(grid: &GridSpec, m: usize, points: usize) -> Self {
        DomainDescriptor {
            x: grid.x.clone(),
            exclude_radius: grid.exclude_radius,
            t: grid.t.clone(),
            u_samples: grid.input_samples(m).len(),
            delta_samples: grid.delta_samples,
            seed: grid.seed,
            points,
            scope: "sampled bounded domain only: passes certify the listed grid, not all of R^n; \
                    psi is bounded on this compact sample, continuity elsewhere is not checked"
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcmSection {
    pub lambda: f64,
    pub worst_margin: Option<f64>,
    pub worst_at: Option<GridPoint>,
    pub worst_u_sweep_margin: Option<f64>,
    pub kernel_points: usize,
    pub vacuous_points: usize,
    pub failing_points: usize,
    pub first_failure: Option<GridPoint>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrthogonalitySection {
    pub max_residual: f64,
    pub worst_at: Option<GridPoint>,
    pub failing_points: usize,
    pub pass: bool,
}

/// Power-law fit `psi ~ c s^p` approaching a point where Q loses rank.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub anchor: GridPoint,
    pub direction: Vec<f64>,
    /// `(s, psi)` pairs, `s` the distance from the anchor.
    pub samples: Vec<(f64, f64)>,
    pub exponent: f64,
    pub r_squared: f64,
    pub diverging: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegrabilitySection {
    pub max_psi: f64,
    pub argmax: Option<GridPoint>,
    pub psi_cap: f64,
    pub invalid_points: usize,
    pub first_invalid: Option<GridPoint>,
    pub worst_inequality_slack: Option<f64>,
    pub growth: Option<PowerLawFit>,
    pub blow_up: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrongSection {
    pub max_h_norm: f64,
    pub c1_pass: bool,
    pub c2_pass: bool,
    pub pass: bool,
    /// Present when the strong conditions pass: whether the certificate is exactly zero.
    pub psi_zero_consistent: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub domain: DomainDescriptor,
    pub tolerances: Tolerances,
    pub evaluation_failures: usize,
    pub first_evaluation_failure: Option<String>,
    pub metric_bounds: Option<MetricBoundsReport>,
    pub ccm: CcmSection,
    pub orthogonality: OrthogonalitySection,
    pub integrability: IntegrabilitySection,
    pub strong: StrongSection,
    pub verdict: bool,
}

/// Runs the per-point checks over the grid, in grid order.
pub fn check_grid(
    sys: &SystemSpec,
    met: &MetricSpec,
    grid: &GridSpec,
    tol: &Tolerances,
) -> Vec<Result<PointResult, ModelError>> {
    let points = grid.points();
    let inputs = grid.input_samples(sys.m());
    let deltas = grid.delta_directions(sys.n());
    crate::par_map(&points, |p| check_point(sys, met, p, &inputs, &deltas, tol))
}

pub fn summarize_ccm(results: &[&PointResult], lambda: f64) -> CcmSection {
    let mut s = CcmSection {
        lambda,
        worst_margin: None,
        worst_at: None,
        worst_u_sweep_margin: None,
        kernel_points: 0,
        vacuous_points: 0,
        failing_points: 0,
        first_failure: None,
        pass: true,
    };
    for r in results {
        match r.margin {
            None => s.vacuous_points += 1,
            Some(m) => {
                s.kernel_points += 1;
                if s.worst_margin.is_none_or(|w| m > w) {
                    s.worst_margin = Some(m);
                    s.worst_at = Some(r.at.clone());
                }
            }
        }
        if let Some(um) = r.u_sweep_margin {
            s.worst_u_sweep_margin = Some(s.worst_u_sweep_margin.map_or(um, |w| w.max(um)));
        }
        if !r.ccm_pass {
            s.failing_points += 1;
            s.first_failure.get_or_insert_with(|| r.at.clone());
        }
    }
    s.pass = s.failing_points == 0;
    s
}

fn summarize_orthogonality(results: &[&PointResult]) -> OrthogonalitySection {
    let mut s = OrthogonalitySection {
        max_residual: 0.0,
        worst_at: None,
        failing_points: 0,
        pass: true,
    };
    for r in results {
        if r.orthogonality.residual > s.max_residual || s.worst_at.is_none() && r.kernel_dim > 0 {
            s.max_residual = s.max_residual.max(r.orthogonality.residual);
            s.worst_at = Some(r.at.clone());
        }
        if !r.orthogonality.pass {
            s.failing_points += 1;
        }
    }
    s.pass = s.failing_points == 0;
    s
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

const PROBE_STEPS: usize = 25;
const PROBE_DECADES: f64 = 3.0;

/// Probes psi along a ray into a grid point where Q drops rank, and fits a
/// power law in the distance. A clearly negative exponent is evidence that
/// psi is unbounded there.
pub fn growth_probe(
    sys: &SystemSpec,
    met: &MetricSpec,
    grid: &GridSpec,
    results: &[&PointResult],
    tol: &Tolerances,
) -> Option<PowerLawFit> {
    let full_rank = results.iter().map(|r| r.q_rank).max()?;
    let argmax = results
        .iter()
        .filter(|r| r.psi.is_some())
        .max_by(|a, b| a.psi.unwrap().total_cmp(&b.psi.unwrap()))
        .map(|r| r.at.clone());
    let dist = |a: &GridPoint, b: &GridPoint| {
        a.x.iter().zip(&b.x).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
    };
    let anchor = results
        .iter()
        .filter(|r| r.q_rank < full_rank)
        .min_by(|a, b| match &argmax {
            Some(target) => dist(&a.at, target).total_cmp(&dist(&b.at, target)),
            None => std::cmp::Ordering::Equal,
        })?
        .at
        .clone();

    let n = sys.n();
    let mut direction = DVector::zeros(n);
    if let Some(target) = &argmax {
        for i in 0..n {
            direction[i] = target.x[i] - anchor.x[i];
        }
    }
    if direction.norm() == 0.0 {
        direction[0] = 1.0;
    }
    direction /= direction.norm();

    let s0 = 0.1 * grid.half_width().max(1e-6);
    let mut samples = Vec::new();
    for k in 0..PROBE_STEPS {
        let s = s0 * 10f64.powf(-PROBE_DECADES * k as f64 / (PROBE_STEPS - 1) as f64);
        let x: Vec<f64> = anchor.x.iter().zip(direction.iter()).map(|(a, d)| a + s * d).collect();
        let Ok(raw) = evaluate_raw(sys, met, &x, anchor.t) else {
            continue;
        };
        if let Ok(cert) = construct_psi(&compute_q(&raw), &compute_h(&raw), tol) {
            if cert.psi > 0.0 && cert.psi.is_finite() {
                samples.push((s, cert.psi));
            }
        }
    }
    if samples.len() < 4 {
        return None;
    }
    let xs: Vec<f64> = samples.iter().map(|(s, _)| s.ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|(_, p)| p.ln()).collect();
    let (exponent, r_squared) = linear_fit(&xs, &ys);
    Some(PowerLawFit {
        anchor,
        direction: direction.iter().copied().collect(),
        samples,
        exponent,
        r_squared,
        diverging: exponent < -0.5 && r_squared >= 0.9,
    })
}

pub fn summarize_integrability(
    sys: &SystemSpec,
    met: &MetricSpec,
    grid: &GridSpec,
    results: &[&PointResult],
    tol: &Tolerances,
) -> IntegrabilitySection {
    let mut s = IntegrabilitySection {
        max_psi: 0.0,
        argmax: None,
        psi_cap: tol.psi_cap,
        invalid_points: 0,
        first_invalid: None,
        worst_inequality_slack: None,
        growth: None,
        blow_up: false,
        pass: true,
    };
    for r in results {
        match r.psi {
            Some(p) => {
                if s.argmax.is_none() || p > s.max_psi {
                    s.max_psi = p;
                    s.argmax = Some(r.at.clone());
                }
            }
            None => {
                s.invalid_points += 1;
                s.first_invalid.get_or_insert_with(|| r.at.clone());
            }
        }
        if let Some(sl) = r.inequality_slack {
            s.worst_inequality_slack = Some(s.worst_inequality_slack.map_or(sl, |w| w.min(sl)));
        }
    }
    s.growth = growth_probe(sys, met, grid, results, tol);
    s.blow_up = s.invalid_points > 0
        || s.max_psi > tol.psi_cap
        || s.growth.as_ref().is_some_and(|g| g.diverging);
    s.pass = !s.blow_up;
    s
}

fn summarize_strong(results: &[&PointResult], ccm: &CcmSection, c1: &IntegrabilitySection, tol: &Tolerances) -> StrongSection {
    let max_h_norm = results.iter().map(|r| r.h_norm_max).fold(0.0, f64::max);
    let c2_pass = max_h_norm <= tol.orth;
    let pass = c2_pass && ccm.pass;
    StrongSection {
        max_h_norm,
        c1_pass: ccm.pass,
        c2_pass,
        pass,
        psi_zero_consistent: pass.then_some(c1.max_psi == 0.0 && c1.invalid_points == 0),
    }
}

/// Overall check on the grid: metric bounds, the contraction condition on the
/// kernel, orthogonality, the psi certificate, and the strong conditions.
/// The verdict is `bounds && contraction && integrability`.
pub fn verify(sys: &SystemSpec, met: &MetricSpec, grid: &GridSpec, tol: &Tolerances) -> VerificationReport {
    let all = check_grid(sys, met, grid, tol);
    let mut failures = 0;
    let mut first_failure = None;
    let mut results = Vec::with_capacity(all.len());
    for r in &all {
        match r {
            Ok(p) => results.push(p),
            Err(e) => {
                failures += 1;
                first_failure.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let metric_bounds = match check_metric_bounds(met, grid) {
        Ok(r) => Some(r),
        Err(e) => {
            failures += 1;
            first_failure.get_or_insert_with(|| e.to_string());
            None
        }
    };
    let ccm = summarize_ccm(&results, met.lambda);
    let orthogonality = summarize_orthogonality(&results);
    let integrability = summarize_integrability(sys, met, grid, &results, tol);
    let strong = summarize_strong(&results, &ccm, &integrability, tol);
    let verdict = failures == 0
        && metric_bounds.as_ref().is_some_and(|b| b.pass)
        && ccm.pass
        && integrability.pass;
    VerificationReport {
        domain: DomainDescriptor::new(grid, sys.m(), all.len()),
        tolerances: *tol,
        evaluation_failures: failures,
        first_evaluation_failure: first_failure,
        metric_bounds,
        ccm,
        orthogonality,
        integrability,
        strong,
        verdict,
    }
}
