//! Multi-stage spatially-sensitive pooling network (MSPN) for script
//! identification on fixed-height, variable-width text-line images.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two concrete instantiations.

pub mod baseline;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use baseline::{average_probs, predict_patches, PatchNet, PatchPrediction};
pub use error::{Error, Result};
pub use eval::{evaluate, ConfusionMatrix, Evaluation};
pub use graph::{load_checkpoint, save_checkpoint, Architecture, MspnConfig, NetworkGraph, PatchNetConfig, SspStage, Variant, VariantOptions};
pub use optim::{train, TrainConfig, TrainHistory};
pub use params::Gradients;
pub use scalar::{Precision, Scalar};
pub use tensor::{FeatureMapStack, FlatVector, PoolMode};

pub type FeatureMaps32 = FeatureMapStack<f32>;
pub type FeatureMaps64 = FeatureMapStack<f64>;
pub type Network32 = NetworkGraph<f32>;
pub type Network64 = NetworkGraph<f64>;
