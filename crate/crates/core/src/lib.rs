//! Estimation of linear latent structure models from categorical data.
//!
//! The pipeline runs in two steps: [`plane::estimate_plane`] recovers the supporting
//! plane of the mixing measure from the moment matrix, then
//! [`solver::conditional_moments`] solves the linear system for conditional moments
//! of the latent coordinates given response patterns. [`oracle`] provides synthetic
//! models with exactly computable moments.

pub mod cli;
pub mod error;
pub mod freq;
pub mod oracle;
pub mod plane;
pub mod schema;
pub mod solver;

pub use error::{LlsError, PlaneStep, Result};
pub use freq::{Dataset, FrequencyTable, MomentMatrix, MomentSource};
pub use oracle::{principal_angles, SupportPoint, SyntheticModel};
pub use plane::{estimate_plane, Basis, PlaneConfig, PlaneFitReport};
pub use schema::{MomentIndex, ResponsePattern, Schema};
pub use solver::{conditional_moments, moment_residual, ConditionalMomentTable, SolverConfig};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
