//! The predictive-coding network: configuration, weights and the
//! per-timestep predict/correct recurrence.

mod config;
mod network;
mod weights;

pub use config::{LstmInputs, ModuleConfig, NetworkConfig, Variant};
pub use network::{Network, NetworkState, Predicted, Rollout, StateVars};
pub use weights::{count_parameters, BoundModule, BoundNetwork, ModuleWeights, NetworkWeights};
