//! Pipeline stages around `vizproto-core`: prompt and image generation, human
//! calibration, and evaluation runs.

pub mod calibration;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod error;
pub mod imagegen;
pub mod layout;
pub mod promptgen;
pub mod retry;
pub mod review;
pub mod synthetic;

pub use config::{PromptStyle, RunConfig, Settings};
pub use error::{AssetGap, PipelineError, Result};
pub use layout::ProjectLayout;
