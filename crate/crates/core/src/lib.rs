pub mod autodiff;
pub mod datasets;
pub mod dau;
pub mod error;
pub mod interpretability;
pub mod network;
pub mod parallel;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autodiff::{Graph, Nonlinearity, Var};
pub use dau::{Dau, DauConvLayer, LayerLinearMap, LayerSpec};
pub use error::{Error, Result};
pub use network::{CodaNet, ContributionMap, NetConfig};
pub use tensor::{ConvGeometry, Rng, Scalar, Tensor};
pub use training::{AdamState, Checkpoint, RunConfig, TrainConfig};
