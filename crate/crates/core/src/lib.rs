//! Core math and inference layer for prototype-based zero-shot image classification.
//!
//! Real and generated images are encoded at several centered crop scales, the
//! per-scale features are blended with linearly decaying weights, and each class
//! is represented by the renormalized mean of its generated-image features. Real
//! images are then assigned to the class whose prototype has the highest inner
//! product with their feature.

pub mod cache;
pub mod classifier;
pub mod encoder;
pub mod error;
pub mod extract;
pub mod schedule;
pub mod vector;

pub use cache::{CacheKey, FeatureCache};
pub use classifier::{
    accuracy, build_prototype, predict, score_all, Accuracy, ClassPrototype, Prediction,
    ScoreMatrix,
};
pub use encoder::{open_encoder, Encoder, EncoderManifest, EncoderRegistry, MockEncoder};
pub use error::{CoreError, Result};
pub use extract::{FeatureExtractor, ImageRecord, ImageSource};
pub use schedule::{
    aggregate_multiscale, crop_region_for_scale, make_schedule, AggregateMode, CropRegion,
    ScaleSchedule,
};
pub use vector::{l2_normalize, FeatureVector};
