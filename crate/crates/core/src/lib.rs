//! Two-stage neural text-to-speech.
//!
//! A recurrent attention model predicts log-mel spectrogram frames from
//! characters ([`predictor`]); a dilated causal convolution stack with a
//! discretized mixture-of-logistics output turns those frames into audio
//! ([`vocoder`]). Every numeric kernel is generic over [`Scalar`] so training
//! can run at `f32` while gradient checks run the same code at `f64`.

// `!(x > 0.0)` is how config checks reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod pipeline;
pub mod predictor;
pub mod scalar;
pub mod text;
pub mod train;
pub mod vocoder;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;

pub type Predictor32 = predictor::Predictor<f32>;
pub type Predictor64 = predictor::Predictor<f64>;

pub type Vocoder32 = vocoder::Vocoder<f32>;
pub type Vocoder64 = vocoder::Vocoder<f64>;
