//! Grounding natural-language texture descriptions in images.
//!
//! The crate covers the whole pipeline: loading phrase-structured
//! descriptions ([`corpus`]), retrieval and captioning metrics
//! ([`metrics`]), image and text encoders ([`encoders`]), three grounding
//! models ([`phrase_classifier`], [`joint_embedding`], [`captioner`]),
//! synthetic compositional probes ([`synthprobe`]), attribute transfer to
//! fine-grained classification ([`transfer`]) and experiment orchestration
//! ([`harness`]).
//!
//! Model math is generic over [`Scalar`]; the aliases below fix the common
//! instantiations.

pub mod captioner;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod joint_embedding;
pub mod metrics;
pub mod nn;
pub mod phrase_classifier;
pub mod scalar;
pub mod synthprobe;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
pub use scalar::{MetricValue, Scalar};

pub type TensorF32 = nn::Tensor<f32>;
pub type TensorF64 = nn::Tensor<f64>;
pub type PhraseClassifierF32 = phrase_classifier::PhraseClassifier<f32>;
pub type PhraseClassifierF64 = phrase_classifier::PhraseClassifier<f64>;
pub type MetricModelF32 = joint_embedding::MetricModel<f32>;
pub type MetricModelF64 = joint_embedding::MetricModel<f64>;
pub type CaptionerF32 = captioner::Captioner<f32>;
pub type CaptionerF64 = captioner::Captioner<f64>;
