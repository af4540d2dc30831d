//! Dense linear-programming solver built on a two-level lazy
//! projection-maintenance data structure with sketched central-path steps.
//!
//! The library is organized bottom-up:
//! - [`linalg`]: dense matrices, factorization-based inverse, Woodbury
//!   updates, and the fixed-capacity padded-block operators.
//! - [`sketch`]: subsampled randomized Hadamard transforms and the sketch
//!   pool, plus an identity mode for deterministic tests.
//! - [`projmaint`]: the projection-maintenance structure that keeps
//!   `sqrt(W) A^T (A W A^T)^-1 A sqrt(W) f(h)` queryable under slowly
//!   changing `w` and `h`.
//! - [`feasible`]: the implicit-iterate extension that keeps `Ax = b` exact.
//! - [`ipm`]: the stochastic central-path driver.
//! - [`oracle`]: brute-force references used by the test suites.
//!
//! Everything numeric is generic over a [`Scalar`] floating-point type;
//! f64 aliases for the main types live at the crate root.

pub mod feasible;
pub mod ipm;
pub mod linalg;
pub mod oracle;
pub mod projmaint;
pub mod sketch;

use std::fmt::{Debug, Display};

/// Floating-point scalar the whole library is generic over: f32 or f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumCast
    + std::iter::Sum
    + Debug
    + Display
    + Default
    + 'static
{
    /// Shorthand for lossy conversion from f64 (panics only on NaN inputs
    /// that f64 itself cannot represent, i.e. never in practice).
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 -> Scalar conversion")
    }
    /// Lossy conversion to f64 for reporting.
    fn to_f64_lossy(self) -> f64 {
        num_traits::NumCast::from(self).expect("Scalar -> f64 conversion")
    }
}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Errors shared by all modules.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("singular matrix: {0}")]
    SingularMatrix(String),
    #[error("padded-block capacity exceeded: need {needed} slots, capacity {capacity}")]
    CapacityExceeded { needed: usize, capacity: usize },
    #[error("padded-block alignment error: {0}")]
    AlignmentError(String),
    #[error("padded-block structure violation: {0}")]
    StructureViolation(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid dimension: {0}")]
    InvalidDim(String),
    #[error("sketch pool exhausted (all {0} operators consumed)")]
    PoolExhausted(usize),
    #[error("potential gradient is numerically zero")]
    ZeroGradient,
    #[error("potential overflow: |lambda * r| = {0} exceeds the exp guard")]
    PotentialBlowup(f64),
    #[error("no convergence after {0} inner steps")]
    NoConvergence(usize),
    #[error("maximum iteration count {0} exceeded")]
    MaxItersExceeded(usize),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
}

pub type Result<T> = std::result::Result<T, Error>;

// f64 aliases for the main domain types.
pub type DenseMatrix64 = linalg::DenseMatrix<f64>;
pub type PaddedBlock64 = linalg::PaddedBlock<f64>;
pub type PaddedVec64 = linalg::PaddedVec<f64>;
pub type SketchOp64 = sketch::SketchOp<f64>;
pub type SketchPool64 = sketch::SketchPool<f64>;
pub type MaintState64 = projmaint::MaintState<f64>;
pub type SolverConfig64 = ipm::SolverConfig<f64>;
pub type Solution64 = ipm::Solution<f64>;
pub type LpInstance64 = ipm::LpInstance<f64>;
