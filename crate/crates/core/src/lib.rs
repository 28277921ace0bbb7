//! Joint subchannel and power allocation for an uplink UAV-assisted cognitive
//! NOMA network, driven by an active-inference agent built on a generalized
//! dynamic Bayesian network.
//!
//! The crate is organised bottom-up: [`radio_env`] produces channels and
//! primary-user activity, [`noma_phy`] turns allocations into superimposed
//! signals and rates, [`gdbn`] learns the offline generative model, [`mjpf`]
//! runs online inference over it, [`agent`] closes the loop, [`baselines`]
//! provides comparison allocators and [`harness`] drives experiments.

pub mod agent;
pub mod baselines;
pub mod gdbn;
pub mod harness;
pub mod mjpf;
pub mod noma_phy;
pub mod radio_env;
pub mod sim;
