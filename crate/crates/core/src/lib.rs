//! Control contraction metric toolkit: symbolic models, pointwise
//! differential quantities, grid verification of the contraction and
//! integrability conditions, the min-norm differential controller with path
//! integration, closed-loop simulation, and dual / feedback transforms.

// `!(x >= 0.0)` style guards are there to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundled;
pub mod controller;
pub mod differential;
pub mod expr;
pub mod linalg;
pub mod model;
pub mod simulator;
pub mod transforms;
pub mod verifier;

pub use expr::{parse, Expr, Var};
pub use model::{load_spec, GridSpec, MetricSpec, Spec, SpecError, SystemSpec};
pub use verifier::{verify, Tolerances, VerificationReport};

/// Order-preserving map, parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub(crate) fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}
