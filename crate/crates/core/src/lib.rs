//! Multi-mode streaming transformer transducer trained with stochastic
//! future context.

pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod masking;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases used by training, checkpoints and decoding.
pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type ParamSet = params::ParamSet<f64>;
pub type PosteriorLattice = model::PosteriorLattice<f64>;
