//! Desk-scale textual query-driven mask transformer for domain-generalized segmentation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the precision.

pub mod autograd;
pub mod backbone;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod mask_decoder;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pixel_decoder;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod text_query;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type TqdmModel64 = model::TqdmModel<f64>;
pub type TqdmModel32 = model::TqdmModel<f32>;
pub type BaselineModel64 = model::BaselineModel<f64>;
pub type Trainer64 = train::Trainer<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Checkpoint64 = train::Checkpoint<f64>;
pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
