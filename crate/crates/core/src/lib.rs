pub(crate) mod codec;
pub mod datasets;
pub mod error;
pub mod forward;
pub mod inference;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod scalar;
pub mod shape;

pub use error::{Error, Result};
pub use forward::{ChannelSpec, MapGenParams, PillarConfig, PillarLibrary, PillarSequence};
pub use scalar::Scalar;
pub use shape::FlowShape;

pub type Tensor = nn::Tensor<f64>;
pub type Network = nn::Network<f64>;
pub type Checkpoint = nn::Checkpoint<f64>;
pub type Apn = models::ApnModel<f64>;
pub type ApnC = models::ApnCModel<f64>;
pub type Itn = models::ItnModel<f64>;
pub type Smc = models::SmcModel<f64>;
