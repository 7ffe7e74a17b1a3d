pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod precnet;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use precnet::{Network, NetworkConfig, NetworkState, NetworkWeights, Variant};
pub use tensor::{Scalar, Tensor};
