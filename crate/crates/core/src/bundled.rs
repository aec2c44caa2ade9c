//! Example specs shipped with the crate.

use crate::model::Spec;

pub const COUNTEREXAMPLE_JSON: &str = include_str!("../specs/counterexample.json");
pub const DOUBLE_INTEGRATOR_JSON: &str = include_str!("../specs/double-integrator.json");
pub const BOUNDED_GAIN_JSON: &str = include_str!("../specs/bounded-gain.json");

/// `(name, json)` for every bundled spec.
pub const ALL: [(&str, &str); 3] = [
    ("counterexample", COUNTEREXAMPLE_JSON),
    ("double-integrator", DOUBLE_INTEGRATOR_JSON),
    ("bounded-gain", BOUNDED_GAIN_JSON),
];

pub fn by_name(name: &str) -> Option<Spec> {
    ALL.iter()
        .find(|(n, _)| *n == name)
        .map(|(_, json)| Spec::from_json(json).expect("bundled spec is valid"))
}

/// Scalar system `x' = -x + x^2 u` with the identity metric.
pub fn counterexample() -> Spec {
    Spec::from_json(COUNTEREXAMPLE_JSON).expect("bundled spec is valid")
}

/// Double integrator with a constant metric from a shifted Riccati equation.
pub fn double_integrator() -> Spec {
    Spec::from_json(DOUBLE_INTEGRATOR_JSON).expect("bundled spec is valid")
}

/// Scalar system `x' = -x + (1 + 0.5 sin x) u`, input gain bounded away from zero.
pub fn bounded_gain() -> Spec {
    Spec::from_json(BOUNDED_GAIN_JSON).expect("bundled spec is valid")
}
