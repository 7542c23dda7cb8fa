//! MicroViTv2 inference engine: reparameterizable blocks, branch fusion,
//! transposed attention, analytic cost counting and energy benchmarking.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! engine path uses `f32`; the `f64` instantiations serve as oracles. The
//! aliases below name the common instantiations.

pub mod bench;
pub mod blocks;
pub mod error;
pub mod fusion;
pub mod grad;
pub mod init;
pub mod io;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use blocks::{Block, Mode};
pub use error::{Error, Result};
pub use model::{Attention, CostReport, Model, ModelConfig, Variant};
pub use scalar::Scalar;
pub use tensor::{BnSpec, ConvSpec, Matrix, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type ConvSpec32 = ConvSpec<f32>;
pub type ConvSpec64 = ConvSpec<f64>;
pub type BnSpec32 = BnSpec<f32>;
pub type BnSpec64 = BnSpec<f64>;
pub type RepBranchSpec32 = fusion::RepBranchSpec<f32>;
pub type RepBranchSpec64 = fusion::RepBranchSpec<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
