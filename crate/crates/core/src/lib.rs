//! Maximum-entropy density estimation for multi-instance data.
//!
//! Every bag of instances is summarized by the empirical mean of a shared
//! random trigonometric feature map. Densities `p(x) = exp(λᵀφ(x) - Z(λ))`
//! are fitted per bag by Newton's method, jointly by nuclear-norm
//! regularized or confidence-constrained solvers, and compared with the
//! closed-form KL divergence of the exponential family.
//!
//! Module map:
//!
//! * [`basis`]: instance domain, feature map, quadrature grids.
//! * [`maxent`]: single-bag statistics, log-partition, Newton fit, KL.
//! * [`lowrank`]: SVD, nuclear norm, singular value soft-thresholding.
//! * [`solvers`]: joint estimation (MDE, RMDE, CMEN) and the ψ-basis.
//! * [`experiments`]: synthetic ground truth, phase diagrams, bound checks.
//! * [`mil`]: bag distances, kernels, citation-kNN and k-fold evaluation.

pub mod basis;
pub mod error;
pub mod experiments;
pub mod lowrank;
pub mod maxent;
pub mod mil;
pub mod rng;
pub(crate) mod serde_vec;
pub mod solvers;

pub use basis::{BasisSpec, Domain, FeatureGrid, FeatureMap, GridKind, IntegrationGrid};
pub use error::{Error, Result};
pub use lowrank::SvdFactors;
pub use maxent::{MEDensity, NewtonConfig, SufficientStats};
pub use solvers::{CmenaConfig, FitReport, LambdaMatrix, RmdeConfig};

/// Version string written next to every output artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
