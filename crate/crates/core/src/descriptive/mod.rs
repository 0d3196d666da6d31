//! Descriptive (energy-based) models: the linear exponential family with
//! exact and Langevin-based maximum likelihood, sequential projection
//! pursuit, and deep energy models trained with contrastive-divergence,
//! persistent, or multi-grid sampling.

mod deep;
mod feature;
mod linear;
mod multigrid;
mod pursuit;

pub use deep::{
    fit_deep_ebm, ConvSpec, DeepEnergyModel, EbmArch, EbmGrads, EbmStat, EbmTrainConfig,
};
pub use feature::{feature_stats, FeatureKind, FeatureMap};
pub use linear::{
    fit_linear_exact, fit_linear_exact_to_moments, fit_linear_langevin, unit_direction_candidates,
    ConvexAscentConfig, DecayRule, LangevinFitConfig, LinearDescriptiveModel, LinearFitStat,
};
pub use multigrid::{
    build_pyramid, downscale_to, fit_multigrid, sample_multigrid, upsample_nearest, GridPyramid,
    IntensityHistogram, MultigridStat, MultigridTrainConfig,
};
pub use pursuit::{histogram_discrepancy, pursue_projection, PursuitOutcome};

use thiserror::Error;

use crate::mcmc::McmcError;
use crate::oracle::OracleError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DescriptiveError {
    #[error("empty data")]
    EmptyData,
    #[error("feature map expects {expected} values, got {actual}")]
    FeatureShape { expected: usize, actual: usize },
    #[error("non-finite feature statistics")]
    NonFiniteStats,
    #[error("{0} features are not differentiable")]
    NotDifferentiable(String),
    #[error("empirical moment {coord} lies on the boundary of the achievable range")]
    BoundaryInfeasible { coord: usize },
    #[error("theta diverged during exact fitting")]
    ThetaDiverged,
    #[error("exact fit did not reach tolerance (residual {residual})")]
    NoConvergence { residual: f64 },
    #[error("log Z has not been computed for this model")]
    MissingLogZ,
    #[error("candidate direction has norm {0}, expected a unit vector")]
    NotUnitVector(f64),
    #[error("sampling chain diverged and the retry from a cold start diverged again")]
    ChainDiverged,
    #[error("pyramid sizes must be strictly increasing, each dividing the next")]
    BadPyramidSpec,
    #[error("image must be square, got {0:?}")]
    NotSquare(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Mcmc(#[from] McmcError),
}
