//! caption-forge: a desk-scale image captioning pipeline.
//!
//! The pipeline chains five independently trained stages: a residual-network
//! multi-label concept detector, a tag-conditioned maximum-entropy language
//! model with beam-search decoding, a two-tower multimodal semantic model for
//! candidate reranking, an embedding-gallery entity recognizer, and a logistic
//! regression confidence estimator. Everything runs on the CPU over a
//! procedurally generated synthetic corpus with known ground truth.
//!
//! Numeric code is generic over the scalar type (`f32` or `f64`) through the
//! [`Scalar`] trait; the pipeline itself and all tests use `f64`.

pub mod bench;
pub mod confidence;
pub mod dmsm;
pub mod entity;
pub mod lm;
pub mod pipeline;
pub mod png_io;
pub mod scalar;
pub mod service;
pub mod synth;
pub mod tensor;
pub mod vision;

pub use scalar::Scalar;
pub use tensor::Tensor;

/// Scalar type used by the assembled pipeline and all serialized models.
pub type F = f64;

/// `f64` tensor, the default throughout the pipeline.
pub type Tensor64 = Tensor<f64>;
/// `f32` tensor, available behind the same generic surface.
pub type Tensor32 = Tensor<f32>;
