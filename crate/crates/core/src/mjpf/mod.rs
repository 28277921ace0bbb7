//! Online inference: a Markov jump particle filter with one Kalman filter per
//! particle, predictive and diagnostic messages, and Bhattacharyya
//! abnormality scores at the continuous and discrete levels.

mod filter;
mod messages;

use thiserror::Error;

pub use filter::{
    anchor_to_clusters,
    belief_update, effective_sample_size, init_belief, kf_predict, kf_update, pf_predict,
    resample, BeliefState, Particle, SliceOutcome,
};
pub use messages::{
    abnormality, compute_messages, discrete_abnormality, Combiner, Gaussian, Message,
    MessageKind, Messages,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MjpfError {
    #[error("innovation covariance is not positive definite; check R and the particle covariances")]
    DegenerateCovariance,
    #[error("covariance is not positive semidefinite")]
    NotPsd,
    #[error("all particle weights vanished; the observation is unexplained by every cluster")]
    ZeroWeights,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}
