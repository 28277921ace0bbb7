//! Offline perception: generalized states, the static-evolution predictor,
//! generalized errors, growing-neural-gas vocabularies and cluster
//! transition matrices.

mod gng;
mod learn;
mod state;
mod transitions;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gng::{gng_train, GngConfig, GngOutcome};
pub use learn::{
    assign_cluster, learn_entity, learn_vocabularies, EntityModel, LearnConfig, LearnedModels,
    SignalTrace,
};
pub use state::{
    generalized_error, generalized_states, ukf_predict, ContinuousDynamics, GeneralizedError,
    GeneralizedState,
};
pub use transitions::{estimate_transitions, segment_of, TransitionMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GdbnError {
    #[error("empty training stream")]
    EmptyStream,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no training traces for entity {0:?}")]
    MissingEntity(Entity),
}

/// Signal source a vocabulary describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Entity {
    Noise,
    Pu,
    Combined,
}

/// One discrete state of a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteCluster {
    pub id: usize,
    pub mean: GeneralizedState,
    pub covariance: nalgebra::Matrix4<f64>,
    pub hit_count: usize,
}

/// Learned clusters of one entity with their transition matrices, indexed
/// `transitions[subchannel][segment]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub entity: Entity,
    pub clusters: Vec<DiscreteCluster>,
    pub transitions: Vec<Vec<TransitionMatrix>>,
}

impl Vocabulary {
    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn segments(&self) -> usize {
        self.transitions.first().map_or(0, Vec::len)
    }

    /// Transition matrix for a subchannel and segment, falling back to the
    /// last subchannel when the vocabulary was learned on fewer channels.
    pub fn transition(&self, subchannel: usize, segment: usize) -> &TransitionMatrix {
        let per_channel = &self.transitions[subchannel.min(self.transitions.len() - 1)];
        &per_channel[segment.min(per_channel.len() - 1)]
    }
}
