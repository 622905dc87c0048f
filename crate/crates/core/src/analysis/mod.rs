//! Gradient checks, gradient-similarity and prefix-commitment measurements,
//! and cost comparison of two runs.

mod commitment;
mod compare;
mod fdcheck;
mod similarity;

pub use commitment::{commitment_curve, prefix_commitment, CommitmentPoint};
pub use compare::{compare_logs, compare_runs, CostReport, RunLog};
pub use fdcheck::{
    central_difference, finite_diff_check, masked_only_coordinates, relative_error, FdEntry, FdReport, FdScenario, LossKind,
    MaskedCheck, DEFAULT_FD_STEP, KINK_MARGIN,
};
pub use similarity::{
    gradient_cosine_matrix, gradient_similarity_study, response_gradient, CosineMatrix,
    CosineSummary, SimilarityStudy,
};

use crate::objective::ObjectiveError;
use crate::policy::PolicyError;
use crate::rollout::RolloutError;
use crate::trainer::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(String),
}

impl From<crate::numerics::NumericsError> for AnalysisError {
    fn from(e: crate::numerics::NumericsError) -> Self {
        AnalysisError::Policy(e.into())
    }
}
