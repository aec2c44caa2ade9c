//! System and metric specifications, the JSON spec schema, and pointwise
//! evaluation of every raw quantity (f, B, M and their partial derivatives).

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, Bindings, EvalError, Expr, Var};
use crate::linalg;

pub const SCHEMA_VERSION: u32 = 1;

/// Absolute slack on the metric bounds check.
pub const METRIC_BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read spec: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("in field {field}: {source}")]
    Parse {
        field: String,
        #[source]
        source: expr::ParseError,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("evaluating {entry}: {source}")]
pub struct ModelError {
    pub entry: String,
    #[source]
    pub source: EvalError,
}

fn eval_entry(e: &Expr, b: &Bindings<'_>, entry: impl FnOnce() -> String) -> Result<f64, ModelError> {
    e.eval(b).map_err(|source| ModelError {
        entry: entry(),
        source,
    })
}

fn check_state_vars(e: &Expr, n: usize, field: &str) -> Result<(), SpecError> {
    for v in e.vars() {
        match v {
            Var::X(i) if i >= n => {
                return Err(SpecError::Dimension(format!(
                    "{field} references {v} but n={n}"
                )))
            }
            Var::U(_) => {
                return Err(SpecError::Schema(format!(
                    "{field} may not depend on the input ({v})"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn state_vars(n: usize) -> Vec<Var> {
    (0..n).map(Var::X).collect()
}

/// A symmetric `n x n` matrix field of expressions in `(x, t)`.
///
/// Only the upper triangle is stored; evaluation mirrors it bitwise, so the
/// numeric result is exactly symmetric.
#[derive(Debug, Clone)]
pub struct SymmetricField {
    n: usize,
    upper: Vec<Vec<Expr>>,
    dx: Vec<Vec<Vec<Expr>>>,
    dt: Vec<Vec<Expr>>,
    state_independent: bool,
}

impl SymmetricField {
    /// `upper[i]` holds entries `(i, i..n)`.
    pub fn new(n: usize, upper: Vec<Vec<Expr>>) -> Result<Self, SpecError> {
        if upper.len() != n {
            return Err(SpecError::Dimension(format!(
                "M_upper has {} rows, n={n}",
                upper.len()
            )));
        }
        for (i, row) in upper.iter().enumerate() {
            if row.len() != n - i {
                return Err(SpecError::Dimension(format!(
                    "M_upper row {i} has {} entries, expected {}",
                    row.len(),
                    n - i
                )));
            }
            for (k, e) in row.iter().enumerate() {
                check_state_vars(e, n, &format!("M[{i}][{}]", i + k))?;
            }
        }
        let dx: Vec<Vec<Vec<Expr>>> = (0..n)
            .map(|k| {
                upper
                    .iter()
                    .map(|row| row.iter().map(|e| e.differentiate(Var::X(k))).collect())
                    .collect()
            })
            .collect();
        let dt = upper
            .iter()
            .map(|row| row.iter().map(|e| e.differentiate(Var::T)).collect())
            .collect();
        let state_independent = dx.iter().flatten().flatten().all(Expr::is_zero);
        Ok(SymmetricField {
            n,
            upper,
            dx,
            dt,
            state_independent,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> &Expr {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        &self.upper[a][b - a]
    }

    /// True when no entry depends on the state.
    pub fn is_state_independent(&self) -> bool {
        self.state_independent
    }

    fn eval_tri(&self, tri: &[Vec<Expr>], b: &Bindings<'_>, label: &str) -> Result<DMatrix<f64>, ModelError> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, row) in tri.iter().enumerate() {
            for (k, e) in row.iter().enumerate() {
                let j = i + k;
                let v = eval_entry(e, b, || format!("{label}[{i}][{j}]"))?;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(m)
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>, ModelError> {
        self.eval_tri(&self.upper, &Bindings::state(x, t), "M")
    }

    /// `d/dx_k` of the field for each k.
    pub fn eval_dx(&self, x: &[f64], t: f64) -> Result<Vec<DMatrix<f64>>, ModelError> {
        let b = Bindings::state(x, t);
        self.dx
            .iter()
            .enumerate()
            .map(|(k, tri)| self.eval_tri(tri, &b, &format!("dM/dx{}", k + 1)))
            .collect()
    }

    pub fn eval_dt(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>, ModelError> {
        self.eval_tri(&self.dt, &Bindings::state(x, t), "dM/dt")
    }
}

/// Control-affine system `x' = f(x,t) + B(x,t) u`.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    n: usize,
    m: usize,
    f: Vec<Expr>,
    b: Vec<Vec<Expr>>,
    df_dx: Vec<Vec<Expr>>,
    // per input column i: n x n Jacobian of b_i
    db_dx: Vec<Vec<Vec<Expr>>>,
}

impl SystemSpec {
    /// `b` is given row-major, `n` rows of `m` entries.
    pub fn new(n: usize, m: usize, f: Vec<Expr>, b: Vec<Vec<Expr>>) -> Result<Self, SpecError> {
        if n == 0 {
            return Err(SpecError::Dimension("n must be at least 1".into()));
        }
        if m == 0 {
            return Err(SpecError::Dimension("m must be at least 1".into()));
        }
        if f.len() != n {
            return Err(SpecError::Dimension(format!("f has {} entries, n={n}", f.len())));
        }
        if b.len() != n {
            return Err(SpecError::Dimension(format!("B has {} rows, n={n}", b.len())));
        }
        for row in &b {
            if row.len() != m {
                return Err(SpecError::Dimension(format!(
                    "B has {} columns, m={m}",
                    row.len()
                )));
            }
        }
        for (i, e) in f.iter().enumerate() {
            check_state_vars(e, n, &format!("f[{i}]"))?;
        }
        for (i, row) in b.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                check_state_vars(e, n, &format!("B[{i}][{j}]"))?;
            }
        }
        let xs = state_vars(n);
        let df_dx = expr::jacobian(&f, &xs);
        let db_dx = (0..m)
            .map(|i| {
                let col: Vec<Expr> = b.iter().map(|row| row[i].clone()).collect();
                expr::jacobian(&col, &xs)
            })
            .collect();
        Ok(SystemSpec {
            n,
            m,
            f,
            b,
            df_dx,
            db_dx,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn drift(&self) -> &[Expr] {
        &self.f
    }

    pub fn input_matrix(&self) -> &[Vec<Expr>] {
        &self.b
    }

    pub fn eval_f(&self, x: &[f64], t: f64) -> Result<DVector<f64>, ModelError> {
        let b = Bindings::state(x, t);
        let vals = self
            .f
            .iter()
            .enumerate()
            .map(|(i, e)| eval_entry(e, &b, || format!("f[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DVector::from_vec(vals))
    }

    pub fn eval_b(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>, ModelError> {
        let b = Bindings::state(x, t);
        let mut out = DMatrix::zeros(self.n, self.m);
        for (i, row) in self.b.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                out[(i, j)] = eval_entry(e, &b, || format!("B[{i}][{j}]"))?;
            }
        }
        Ok(out)
    }

    /// `f(x,t) + B(x,t) u`.
    pub fn vector_field(&self, x: &[f64], u: &[f64], t: f64) -> Result<DVector<f64>, ModelError> {
        let f = self.eval_f(x, t)?;
        let b = self.eval_b(x, t)?;
        Ok(f + b * DVector::from_column_slice(u))
    }

    fn eval_square(&self, exprs: &[Vec<Expr>], b: &Bindings<'_>, label: &str) -> Result<DMatrix<f64>, ModelError> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for (i, row) in exprs.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                out[(i, j)] = eval_entry(e, b, || format!("{label}[{i}][{j}]"))?;
            }
        }
        Ok(out)
    }
}

/// Candidate metric `M(x,t)` with the bounds and rate it is claimed to satisfy.
#[derive(Debug, Clone)]
pub struct MetricSpec {
    pub field: SymmetricField,
    pub alpha1: f64,
    pub alpha2: f64,
    pub lambda: f64,
}

impl MetricSpec {
    pub fn new(field: SymmetricField, alpha1: f64, alpha2: f64, lambda: f64) -> Result<Self, SpecError> {
        if !(alpha1 > 0.0 && alpha1.is_finite()) {
            return Err(SpecError::Schema(format!("alpha1 must be > 0, got {alpha1}")));
        }
        if !(alpha2 >= alpha1 && alpha2.is_finite()) {
            return Err(SpecError::Schema(format!(
                "alpha2 must be >= alpha1, got {alpha2} < {alpha1}"
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(SpecError::Schema(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(MetricSpec {
            field,
            alpha1,
            alpha2,
            lambda,
        })
    }

    pub fn n(&self) -> usize {
        self.field.dim()
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>, ModelError> {
        self.field.eval(x, t)
    }

    /// Overshoot constant `sqrt(alpha2 / alpha1)`.
    pub fn overshoot(&self) -> f64 {
        (self.alpha2 / self.alpha1).sqrt()
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self, SpecError> {
        MetricSpec::new(self.field.clone(), self.alpha1, self.alpha2, lambda)
    }
}

/// Differential state sample: a point, an input, a time and a tangent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub t: f64,
    pub delta: Vec<f64>,
}

/// Every raw quantity needed downstream, evaluated at `(x, t)`.
#[derive(Debug, Clone)]
pub struct RawEval {
    pub x: Vec<f64>,
    pub t: f64,
    pub f: DVector<f64>,
    pub b: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub df_dx: DMatrix<f64>,
    /// `db_dx[i][(r, k)] = d B[r][i] / d x_k`
    pub db_dx: Vec<DMatrix<f64>>,
    /// `dm_dx[k] = dM / dx_k`
    pub dm_dx: Vec<DMatrix<f64>>,
    pub dm_dt: DMatrix<f64>,
}

impl RawEval {
    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Directional derivative of M along `v`: `sum_k dM/dx_k v_k`.
    pub fn dm_along(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, n);
        for (k, dm) in self.dm_dx.iter().enumerate() {
            if v[k] != 0.0 {
                out += dm * v[k];
            }
        }
        out
    }
}

pub fn evaluate_raw(sys: &SystemSpec, met: &MetricSpec, x: &[f64], t: f64) -> Result<RawEval, ModelError> {
    assert_eq!(x.len(), sys.n, "state dimension");
    let bind = Bindings::state(x, t);
    let db_dx = sys
        .db_dx
        .iter()
        .enumerate()
        .map(|(i, jac)| sys.eval_square(jac, &bind, &format!("dB[:,{i}]/dx")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RawEval {
        x: x.to_vec(),
        t,
        f: sys.eval_f(x, t)?,
        b: sys.eval_b(x, t)?,
        m: met.eval(x, t)?,
        df_dx: sys.eval_square(&sys.df_dx, &bind, "df/dx")?,
        db_dx,
        dm_dx: met.field.eval_dx(x, t)?,
        dm_dt: met.field.eval_dt(x, t)?,
    })
}

/// Closed interval sampled at `count` evenly spaced points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, usize)", into = "(f64, f64, usize)")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl From<(f64, f64, usize)> for Interval {
    fn from((lo, hi, count): (f64, f64, usize)) -> Self {
        Interval { lo, hi, count }
    }
}

impl From<Interval> for (f64, f64, usize) {
    fn from(i: Interval) -> Self {
        (i.lo, i.hi, i.count)
    }
}

impl Interval {
    pub fn samples(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![0.5 * (self.lo + self.hi)],
            c => (0..c)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (c - 1) as f64)
                .collect(),
        }
    }
}

fn default_t() -> Vec<f64> {
    vec![0.0]
}

fn default_delta_samples() -> usize {
    16
}

pub const DEFAULT_SEED: u64 = 42;

fn default_seed() -> u64 {
    DEFAULT_SEED
}

/// Bounded sampling domain for the grid checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// One `[lo, hi, count]` per state dimension.
    pub x: Vec<Interval>,
    /// Input samples, each of length m.
    #[serde(default)]
    pub u: Vec<Vec<f64>>,
    #[serde(default = "default_t")]
    pub t: Vec<f64>,
    #[serde(default = "default_delta_samples")]
    pub delta_samples: usize,
    /// Points with `max_i |x_i| < exclude_radius` are skipped.
    #[serde(default)]
    pub exclude_radius: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub x: Vec<f64>,
    pub t: f64,
}

impl GridSpec {
    pub fn uniform(x: Vec<Interval>) -> Self {
        GridSpec {
            x,
            u: Vec::new(),
            t: default_t(),
            delta_samples: default_delta_samples(),
            exclude_radius: 0.0,
            seed: DEFAULT_SEED,
        }
    }

    fn validate(&self, n: usize, m: usize) -> Result<(), SpecError> {
        if self.x.len() != n {
            return Err(SpecError::Dimension(format!(
                "grid.x has {} intervals, n={n}",
                self.x.len()
            )));
        }
        if self.x.iter().any(|i| i.count == 0 || !(i.lo <= i.hi)) {
            return Err(SpecError::Schema("grid intervals need lo <= hi and count >= 1".into()));
        }
        if let Some(u) = self.u.iter().find(|u| u.len() != m) {
            return Err(SpecError::Dimension(format!(
                "grid.u sample has {} entries, m={m}",
                u.len()
            )));
        }
        if self.t.is_empty() {
            return Err(SpecError::Schema("grid.t must not be empty".into()));
        }
        Ok(())
    }

    /// Cartesian product of the state samples and time samples, in row-major
    /// order with the last state coordinate varying fastest, time slowest.
    pub fn points(&self) -> Vec<GridPoint> {
        let axes: Vec<Vec<f64>> = self.x.iter().map(Interval::samples).collect();
        let mut states: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &axes {
            states = states
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        let r = self.exclude_radius;
        self.t
            .iter()
            .flat_map(|&t| {
                states
                    .iter()
                    .filter(move |x| r <= 0.0 || x.iter().fold(0.0f64, |a, v| a.max(v.abs())) >= r)
                    .map(move |x| GridPoint { x: x.clone(), t })
            })
            .collect()
    }

    /// Unit-sphere directions, deterministic for a given seed.
    pub fn delta_directions(&self, n: usize) -> Vec<DVector<f64>> {
        unit_directions(n, self.delta_samples, self.seed)
    }

    pub fn input_samples(&self, m: usize) -> Vec<Vec<f64>> {
        if self.u.is_empty() {
            vec![vec![0.0; m]]
        } else {
            self.u.clone()
        }
    }

    pub fn half_width(&self) -> f64 {
        self.x
            .iter()
            .map(|i| 0.5 * (i.hi - i.lo))
            .fold(0.0, f64::max)
    }
}

pub fn unit_directions(n: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let norm = v.norm();
        if norm > 1e-12 {
            out.push(v / norm);
        }
    }
    out
}

/// Closed-loop scenario: start state and a target generated by holding
/// `u_star` from `x_star`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub x0: Vec<f64>,
    pub x_star: Vec<f64>,
    pub u_star: Vec<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_horizon() -> f64 {
    10.0
}

fn default_step() -> f64 {
    1e-3
}

/// Affine feedback `u = alpha(x) + beta(x) v`.
#[derive(Debug, Clone)]
pub struct TransformSpec {
    pub alpha: Vec<Expr>,
    pub beta: Vec<Vec<Expr>>,
}

impl TransformSpec {
    pub fn new(m: usize, n: usize, alpha: Vec<Expr>, beta: Vec<Vec<Expr>>) -> Result<Self, SpecError> {
        if alpha.len() != m {
            return Err(SpecError::Dimension(format!(
                "transform.alpha has {} entries, m={m}",
                alpha.len()
            )));
        }
        if beta.len() != m || beta.iter().any(|r| r.len() != m) {
            return Err(SpecError::Dimension(format!("transform.beta must be {m}x{m}")));
        }
        for (i, e) in alpha.iter().enumerate() {
            check_state_vars(e, n, &format!("transform.alpha[{i}]"))?;
        }
        for (i, row) in beta.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                check_state_vars(e, n, &format!("transform.beta[{i}][{j}]"))?;
            }
        }
        Ok(TransformSpec { alpha, beta })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformDoc {
    alpha: Vec<String>,
    beta: Vec<Vec<String>>,
}

/// On-disk layout of a spec file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDoc {
    schema: u32,
    #[serde(default)]
    name: String,
    n: usize,
    m: usize,
    f: Vec<String>,
    #[serde(rename = "B")]
    b: Vec<Vec<String>>,
    #[serde(rename = "M_upper")]
    m_upper: Vec<Vec<String>>,
    alpha1: f64,
    alpha2: f64,
    lambda: f64,
    grid: GridSpec,
    #[serde(default)]
    scenario: Option<Scenario>,
    #[serde(default)]
    transform: Option<TransformDoc>,
}

/// A loaded and dimension-checked spec file.
#[derive(Debug, Clone)]
pub struct Spec {
    pub name: String,
    pub system: SystemSpec,
    pub metric: MetricSpec,
    pub grid: GridSpec,
    pub scenario: Option<Scenario>,
    pub transform: Option<TransformSpec>,
}

fn parse_field(text: &str, field: String) -> Result<Expr, SpecError> {
    expr::parse(text).map_err(|source| SpecError::Parse { field, source })
}

fn metric_upper(n: usize, rows: &[Vec<String>]) -> Result<Vec<Vec<Expr>>, SpecError> {
    if rows.len() != n {
        return Err(SpecError::Dimension(format!("M_upper has {} rows, n={n}", rows.len())));
    }
    let full = rows.iter().all(|r| r.len() == n);
    let triangular = rows.iter().enumerate().all(|(i, r)| r.len() == n - i);
    if !full && !triangular {
        return Err(SpecError::Dimension(
            "M_upper rows must be either the upper triangle (row i has n-i entries) or a full n x n matrix".into(),
        ));
    }
    let mut parsed = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        let offset = if full && !triangular { 0 } else { i };
        let parsed_row = row
            .iter()
            .enumerate()
            .map(|(k, s)| parse_field(s, format!("M_upper[{i}][{}]", k + offset)))
            .collect::<Result<Vec<_>, _>>()?;
        parsed.push(parsed_row);
    }
    if full && !triangular {
        for i in 0..n {
            for j in 0..i {
                if parsed[i][j] != parsed[j][i] {
                    return Err(SpecError::Schema(format!(
                        "M is not symmetric: M[{i}][{j}] = {} but M[{j}][{i}] = {}",
                        parsed[i][j], parsed[j][i]
                    )));
                }
            }
        }
        for (i, row) in parsed.iter_mut().enumerate() {
            row.drain(..i);
        }
    }
    Ok(parsed)
}

impl Spec {
    pub fn from_json(text: &str) -> Result<Spec, SpecError> {
        let doc: SpecDoc = serde_json::from_str(text)?;
        if doc.schema != SCHEMA_VERSION {
            return Err(SpecError::Schema(format!(
                "unsupported schema {}, expected {SCHEMA_VERSION}",
                doc.schema
            )));
        }
        let (n, m) = (doc.n, doc.m);
        let f = doc
            .f
            .iter()
            .enumerate()
            .map(|(i, s)| parse_field(s, format!("f[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let b = doc
            .b
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, s)| parse_field(s, format!("B[{i}][{j}]")))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let system = SystemSpec::new(n, m, f, b)?;
        let field = SymmetricField::new(n, metric_upper(n, &doc.m_upper)?)?;
        let metric = MetricSpec::new(field, doc.alpha1, doc.alpha2, doc.lambda)?;
        doc.grid.validate(n, m)?;
        if let Some(sc) = &doc.scenario {
            if sc.x0.len() != n || sc.x_star.len() != n || sc.u_star.len() != m {
                return Err(SpecError::Dimension(format!(
                    "scenario needs x0, x_star of length n={n} and u_star of length m={m}"
                )));
            }
            if !(sc.step > 0.0 && sc.horizon > 0.0) {
                return Err(SpecError::Schema("scenario horizon and step must be positive".into()));
            }
        }
        let transform = match &doc.transform {
            None => None,
            Some(tf) => {
                let alpha = tf
                    .alpha
                    .iter()
                    .enumerate()
                    .map(|(i, s)| parse_field(s, format!("transform.alpha[{i}]")))
                    .collect::<Result<Vec<_>, _>>()?;
                let beta = tf
                    .beta
                    .iter()
                    .enumerate()
                    .map(|(i, row)| {
                        row.iter()
                            .enumerate()
                            .map(|(j, s)| parse_field(s, format!("transform.beta[{i}][{j}]")))
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Some(TransformSpec::new(m, n, alpha, beta)?)
            }
        };
        Ok(Spec {
            name: doc.name,
            system,
            metric,
            grid: doc.grid,
            scenario: doc.scenario,
            transform,
        })
    }

    /// Variables referenced anywhere in the spec's expressions.
    pub fn referenced_vars(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        for e in self.system.f.iter().chain(self.system.b.iter().flatten()) {
            out.extend(e.vars());
        }
        out
    }
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<Spec, SpecError> {
    let text = std::fs::read_to_string(path)?;
    Spec::from_json(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricBoundsReport {
    pub min_eigenvalue: f64,
    pub min_at: Vec<f64>,
    pub max_eigenvalue: f64,
    pub max_at: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub tolerance: f64,
    pub violations: usize,
    pub first_violation: Option<Vec<f64>>,
    pub pass: bool,
}

/// Scans the extreme eigenvalues of M over the grid against `[alpha1, alpha2]`.
pub fn check_metric_bounds(met: &MetricSpec, grid: &GridSpec) -> Result<MetricBoundsReport, ModelError> {
    let mut report = MetricBoundsReport {
        min_eigenvalue: f64::INFINITY,
        min_at: Vec::new(),
        max_eigenvalue: f64::NEG_INFINITY,
        max_at: Vec::new(),
        alpha1: met.alpha1,
        alpha2: met.alpha2,
        tolerance: METRIC_BOUND_TOL,
        violations: 0,
        first_violation: None,
        pass: true,
    };
    for p in grid.points() {
        let (lo, hi) = linalg::sym_eig_range(&met.eval(&p.x, p.t)?);
        let mut at = p.x.clone();
        at.push(p.t);
        if lo < report.min_eigenvalue {
            report.min_eigenvalue = lo;
            report.min_at = at.clone();
        }
        if hi > report.max_eigenvalue {
            report.max_eigenvalue = hi;
            report.max_at = at.clone();
        }
        if lo < met.alpha1 - METRIC_BOUND_TOL || hi > met.alpha2 + METRIC_BOUND_TOL {
            report.violations += 1;
            report.first_violation.get_or_insert(at);
        }
    }
    report.pass = report.violations == 0;
    Ok(report)
}
