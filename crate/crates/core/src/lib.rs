//! Rotation-equivariant Vector-Neuron transformer toolkit.
//!
//! The crate is generic over the scalar type (`f32` or `f64`); the aliases at
//! the crate root fix it to double precision, which is the default everywhere.

pub mod attention;
pub mod audit;
pub mod autodiff;
pub mod baseline;
pub mod data;
pub mod error;
mod io;
pub mod models;
pub mod nn;
pub mod params;
pub mod rng;
pub mod rotation;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vn;

pub use attention::EncoderConfig;
pub use autodiff::{eval, Gradients, Tape, Var};
pub use data::{Dataset, TaskKind};
pub use error::{Error, Result};
pub use models::{AttributedPointCloud, Classifier, FusionMode, Forecaster, Model, ModelConfig, Target};
pub use params::{Bound, ParamId, ParamSet};
pub use rng::SplitMix64;
pub use rotation::{sample_rotation, sample_rotation_with, Rotation};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{RunConfig, TrainOptions, Trainer};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Rotation64 = Rotation<f64>;
pub type ParamSet64 = ParamSet<f64>;
pub type Classifier64 = Classifier<f64>;
pub type Classifier32 = Classifier<f32>;
pub type Forecaster64 = Forecaster<f64>;
