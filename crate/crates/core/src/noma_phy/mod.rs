//! Physical layer of the power-domain NOMA uplink: per-user constellations,
//! superposition, successive interference cancellation, achievable rates and
//! the feasibility constraints of the allocation problem.
//!
//! Functions here are unit-agnostic. Callers decide the scale of `gains` and
//! `noise`; the simulator passes gains normalised by a reference link so that
//! received powers, the layer gap and the constellation spacing share one
//! scale.

mod constellation;
mod constraints;
mod ladder;
mod rate;
mod sic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use constellation::{modulate, modulate_pu, rotation, superimpose, QPSK_WORDS};
pub use constraints::{check_constraints, ConstraintReport, Violation};
pub use ladder::{
    composite_min_distance, decodable_layers, enforce_ladder, enforce_min_distance, layer_margins,
    minimal_ladder, LadderOutcome,
};
pub use rate::{achievable_rate, channel_sum_rate, sum_rate, Allocation, RateReport};
pub use sic::{sic_decode, sic_order, SicOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhyError {
    #[error("symbol word must have {expected} bits, got {got}")]
    WordLength { expected: usize, got: usize },
    #[error("bit values must be 0 or 1")]
    InvalidBit,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("{0} users cannot share one subchannel within the caps; reduce M or increase the cap")]
    Infeasible(usize),
    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),
}

/// Constellation and SIC spacing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstellationConfig {
    /// Minimum distance between points of the superimposed constellation.
    pub delta_y: f64,
    /// Minimum received-power gap between successive SIC layers.
    pub p_th: f64,
    /// Maximum number of users per subchannel; fixes the rotation step.
    pub max_users: usize,
}

impl ConstellationConfig {
    pub fn new(delta_y: f64, p_th: f64, max_users: usize) -> Result<Self, PhyError> {
        let cfg = Self {
            delta_y,
            p_th,
            max_users,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PhyError> {
        if !(self.delta_y > 0.0) || !(self.p_th >= 0.0) || self.max_users == 0 {
            return Err(PhyError::InvalidAllocation(format!(
                "constellation config {self:?} out of range"
            )));
        }
        Ok(())
    }

    /// Phase increment between successive SIC ranks, `π / (2M)`.
    pub fn rotation_step(&self) -> f64 {
        std::f64::consts::PI / (2.0 * self.max_users as f64)
    }
}
