// `Scalar` is f64 by default, so casts to f64 only do work in the f32 build.
#![allow(clippy::unnecessary_cast)]

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod pnm;
pub mod rollout;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vit;
pub mod zsl;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
pub use vit::{EncoderTrace, ModelConfig, Vit, VitWeights};
