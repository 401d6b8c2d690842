//! Statistical POD model reduction and fast feedback synthesis for
//! quadratic-bilinear control systems.
//!
//! The pipeline: sample closed-loop trajectories of the full-order system
//! ([`spod::collect_snapshots`]), extract a reduced basis that minimizes the
//! empirical projection risk, Galerkin-project the dynamics
//! ([`spod::build_reduced`]), synthesize feedback on the reduced model via
//! LQR/SDRE ([`riccati`]) or open-loop PMP ([`pmp`]), and compress the
//! reduced feedback law into a tensor-train surrogate ([`ftt`]) that
//! evaluates in microseconds.
//!
//! [`burgers2d`] assembles the 2D viscous Burgers benchmark with Neumann
//! boundary control, and [`evalrisk`] provides the error indicators, the
//! Monte-Carlo validation of the projection-risk bound, and timing
//! harnesses.

pub mod burgers2d;
pub mod evalrisk;
pub mod ftt;
pub mod io;
pub mod linalg;
pub mod pmp;
pub mod qbsys;
pub mod riccati;
pub mod spod;

use nalgebra::DVector;

/// Errors surfaced by the solvers and the artifact I/O layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("Newton did not converge within {iterations} iterations (residual {residual:.3e})")]
    NewtonNonconvergence { iterations: usize, residual: f64 },

    #[error("integration failed at step {step}: {source}")]
    StepFailure {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("linear solve failed: {0}")]
    SingularSystem(String),

    #[error("Riccati equation has no stable invariant subspace of the required dimension")]
    Unstabilizable,

    #[error("Riccati solution is not positive semidefinite (detectability failure)")]
    Indefinite,

    #[error("SDRE failed at state with norm {state_norm:.3e}: {source}")]
    SdreAtState {
        state: DVector<f64>,
        state_norm: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("non-orthonormal basis: deviation {0:.3e}")]
    InvalidBasis(f64),

    #[error("TT cross pivot degeneracy: {0}")]
    PivotDegeneracy(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
