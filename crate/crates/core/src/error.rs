use thiserror::Error;

use crate::structure::Violation;

/// Errors raised by the estimators, solvers and file formats of this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coupling structure: {}", format_violations(.0))]
    InvalidStructure(Vec<Violation>),

    /// A group covariance is (numerically) singular. This usually means one
    /// level of the group is an affine function of the others and can be
    /// removed from the group.
    #[error(
        "covariance of coupling group {} is singular (condition number {condition:.3e}); \
         a level of this group is redundant and should be removed{hint}",
        .group + 1
    )]
    SingularGroupCovariance {
        group: usize,
        condition: f64,
        hint: &'static str,
    },

    #[error("the aggregated precision matrix phi is singular")]
    SingularPhi,

    #[error("the saddle-point system is singular")]
    SingularSystem,

    #[error("element {element}: {source}")]
    SingularElement {
        element: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{what} needs at least {required} samples, got {actual}")]
    InsufficientSamples {
        what: &'static str,
        required: usize,
        actual: usize,
    },

    #[error("group {} has m = 0 samples", .0 + 1)]
    ZeroSamples(usize),

    #[error("infeasible allocation problem: {0}")]
    Infeasible(String),

    #[error("target variance {target:.3e} is unreachable: {reason}")]
    Unreachable { target: f64, reason: String },

    #[error("basis is not orthonormal (residual {residual:.3e})")]
    NotOrthonormal { residual: f64 },

    #[error("problem size {size} exceeds the configured cap {cap}")]
    TooLarge { size: usize, cap: usize },

    #[error("negative variance bound {value:.3e} for group {}", .group + 1)]
    NegativeBound { group: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        })
    }
}
