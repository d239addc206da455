mod ce;
mod estimate;
mod mixture;
mod problem;
mod sis;
mod transport;

pub use ce::{ce_method, ce_run, CeConfig};
pub use estimate::{is_estimate, mc_cov, mc_estimate, EstimateReport, LevelDiagnostics, WeightedBatch};
pub use mixture::{
    effective_sample_size, floor_covariance, kmeans_init, weighted_em_fit, weighted_em_from, EmFit, EmSettings,
    GaussianMixtureProposal, MixtureParams, DEFAULT_COV_FLOOR,
};
pub use problem::{standard_problem, CostFn, LogDensityFn, Problem};
pub use sis::{csmh_move, sis, sis_run, CsmhOutput, SisConfig};
pub use transport::{latent_is, run_method, target_is, IsMethod, IsOutcome};

use crate::stats::RowMatrix;

/// Estimator output plus its final sample set in the sampling space: the
/// fresh evaluation batch for CE, the final particles for SIS.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: EstimateReport,
    pub samples: RowMatrix,
    pub costs: Vec<f64>,
}
