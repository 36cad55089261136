//! Numerical laboratory for the Sinjukov operator S*S (symmetric 2-tensors) and the
//! Eisenhart operator E*E (1-forms) on model manifolds: flat tori T^n and the round
//! unit sphere S^2.
//!
//! The crate discretizes the first-order factors (covariant derivative, symmetric
//! differential, divergence) with 2nd-order centered differences, forms normal
//! operators with exact weighted-transpose adjoints, and checks structure: adjointness,
//! principal-symbol injectivity, nonnegativity, kernel dimensions, orthogonal
//! decompositions, an integral identity, and end-to-end projective equivalence via
//! metric reconstruction and geodesic correspondence.

pub mod fields;
pub mod grid;
pub mod harmonic;
pub mod operators;
pub mod projective;
pub mod sparse;
pub mod spectral;
pub mod symbols;

pub use fields::{Sym, TensorField, Valence};
pub use grid::{CurvatureData, GeometryKind, ManifoldGrid};
pub use operators::DiscreteOperator;

/// Crate version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("valence mismatch: {0}")]
    ValenceMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate plane (normalized Gram determinant {0:.3e})")]
    DegeneratePlane(f64),
    #[error("degenerate tensor at node {node}: {what}")]
    DegenerateTensor { node: usize, what: String },
    #[error("field is not integrable: closedness residual {residual:.3e} exceeds {allowed:.3e}")]
    NonIntegrable { residual: f64, allowed: f64 },
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("invalid metric: {0}")]
    InvalidMetric(String),
    #[error("solver failure: {0}")]
    SolverError(String),
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("trajectory enters unresolvable polar region (sin theta = {0:.3e})")]
    PoleProximity(f64),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
