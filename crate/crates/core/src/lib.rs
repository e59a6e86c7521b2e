//! Multilevel best linear unbiased estimators (MLBLUE).
//!
//! Estimators for expectations of scalars and vectors, for scalar
//! covariances and for covariance matrices (with optimal multilevel
//! localization), plus sample-allocation optimization and Gaussian model
//! hierarchies with exact moments for verification.
//!
//! Levels and groups are 0-based throughout this crate. Text documents and
//! the command line use 1-based indices.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod basis;
pub mod blue;
pub mod container;
pub mod covmat;
pub mod ensemble;
pub mod error;
pub mod linalg;
pub mod moments;
pub mod mosap;
pub mod rng;
pub mod structure;
pub mod vector;
pub mod synthetic;

pub use blue::{
    apply_scalar_estimator, kkt_solve, mlblue_variance, optimal_scalar_weights, GroupMomentSet,
    KktSolution, MomentKind, SolveOptions, WeightSet,
};
pub use basis::{BasisKind, OrthonormalBasis};
pub use covmat::{CovMatrixEstimate, EquivalenceClassPartition, LocalizationMap};
pub use ensemble::{Ensemble, EnsembleMetadata, GroupSamples};
pub use error::{Error, Result};
pub use moments::{CovCovMatrix, CovCovModel, PairMoments};
pub use structure::{CouplingStructure, StructureDoc, Violation};
pub use vector::{Flavor, VectorWeightSet, VectorWeights};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
