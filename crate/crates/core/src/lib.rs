//! Camera-based heart-rate sensing: synthetic facial video with a known
//! pulse, event-driven duty cycling, differential preprocessing, a
//! two-branch temporal-shift network trained from scratch, classical
//! baselines and evaluation metrics.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below name the usual instantiations.

pub mod analysis;
pub mod app;
pub mod baselines;
pub mod container;
pub mod dsp;
pub mod dutycycle;
pub mod error;
pub mod pipeline;
pub mod preprocess;
pub mod scalar;
pub mod signal;
pub mod stnet;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Frame32 = signal::Frame<f32>;
pub type Frame64 = signal::Frame<f64>;
pub type FrameSequence32 = signal::FrameSequence<f32>;
pub type FrameSequence64 = signal::FrameSequence<f64>;
pub type BvpSignal32 = signal::BvpSignal<f32>;
pub type BvpSignal64 = signal::BvpSignal<f64>;
pub type Patch32 = preprocess::Patch<f32>;
pub type Patch64 = preprocess::Patch<f64>;
pub type Tensor32 = stnet::Tensor4<f32>;
pub type Tensor64 = stnet::Tensor4<f64>;
pub type Weights32 = stnet::NetworkWeights<f32>;
pub type Weights64 = stnet::NetworkWeights<f64>;
