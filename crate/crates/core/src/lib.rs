//! Tri-plane scene representation with a deformable-attention encoder.
//!
//! The crate models a 3D volume around an ego vehicle with three axis-aligned
//! feature planes (top, side, front). A small attention encoder lifts
//! multi-camera images onto the planes; point and voxel heads decode semantic
//! occupancy from them. Everything runs on a hand-rolled tensor engine with
//! reverse-mode differentiation, and a synthetic scene generator provides
//! deterministic toy data for training and evaluation.
//!
//! All numeric code is generic over the scalar type via [`scalar::Real`];
//! `f32` is the working precision and `f64` backs the finite-difference
//! gradient oracle. The aliases below fix the common instantiations.

pub mod data;
pub mod encoder;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod numeric;
pub mod scalar;
pub mod tpv;
pub mod train;

use thiserror::Error as ThisError;

/// Crate-wide error, aggregating the per-module error types.
#[derive(Debug, ThisError)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] numeric::NumericError),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Tpv(#[from] tpv::TpvError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Head(#[from] head::HeadError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
}

/// Working-precision tensor.
pub type Tensor32 = numeric::Tensor<f32>;
/// Oracle-precision tensor, used by finite-difference checks.
pub type Tensor64 = numeric::Tensor<f64>;
