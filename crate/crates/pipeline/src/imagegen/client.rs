//! Text-to-image engines: the HTTP wire client and an in-process stub.

use std::io::Cursor;
use std::sync::Arc;
use std::time::Duration;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::T2iSettings;
use crate::retry::with_backoff;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("image generation endpoint is not configured (set T2I_API_URL or t2i.url)")]
    NotConfigured,
    #[error("generation transport error: {0}")]
    Transport(String),
    #[error("generation endpoint rejected the credentials (HTTP {0})")]
    Auth(u16),
    #[error("generation endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("generation endpoint returned an undecodable image: {0}")]
    InvalidImage(String),
}

impl GenError {
    pub fn is_retryable(&self) -> bool {
        match self {
            GenError::Transport(_) => true,
            GenError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Wire body of a generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub seed: u64,
    pub guidance_scale: f64,
    pub num_inference_steps: u32,
    pub width: u32,
    pub height: u32,
}

pub trait ImageGenerator: Send + Sync {
    fn engine_id(&self) -> String;
    /// Returns encoded image bytes (PNG for the HTTP engine).
    fn generate(&self, request: &GenerateRequest) -> Result<Vec<u8>, GenError>;
}

/// `POST {prompt, seed, guidance_scale, num_inference_steps, width, height}` → PNG bytes.
pub struct HttpImageGenerator {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
    engine_id: String,
    retries: u32,
    backoff: Duration,
}

impl HttpImageGenerator {
    pub fn from_settings(settings: &T2iSettings) -> Result<Self, GenError> {
        let url = settings.url.clone().ok_or(GenError::NotConfigured)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| GenError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            url,
            api_key: settings.api_key.clone(),
            engine_id: settings.engine_id.clone(),
            retries: settings.retries,
            backoff: Duration::from_millis(500),
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn send_once(&self, request: &GenerateRequest) -> Result<Vec<u8>, GenError> {
        let mut builder = self.client.post(&self.url).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| GenError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        match status {
            200..=299 => response
                .bytes()
                .map(|b| b.to_vec())
                .map_err(|e| GenError::Transport(e.to_string())),
            401 | 403 => Err(GenError::Auth(status)),
            _ => Err(GenError::Status {
                status,
                body: response.text().unwrap_or_default(),
            }),
        }
    }
}

impl ImageGenerator for HttpImageGenerator {
    fn engine_id(&self) -> String {
        self.engine_id.clone()
    }

    fn generate(&self, request: &GenerateRequest) -> Result<Vec<u8>, GenError> {
        with_backoff(self.retries, self.backoff, GenError::is_retryable, |_| self.send_once(request))
    }
}

type Painter = dyn Fn(&GenerateRequest) -> Result<RgbImage, GenError> + Send + Sync;

/// In-process engine that paints images with a closure; for tests and offline fixtures.
#[derive(Clone)]
pub struct StubImageGenerator {
    id: String,
    paint: Arc<Painter>,
}

impl StubImageGenerator {
    pub fn new(
        id: impl Into<String>,
        paint: impl Fn(&GenerateRequest) -> Result<RgbImage, GenError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            id: id.into(),
            paint: Arc::new(paint),
        }
    }

    /// Solid images whose colour is derived from the prompt and seed.
    pub fn solid() -> Self {
        Self::new("stub-solid", Self::solid_image)
    }

    pub fn solid_image(req: &GenerateRequest) -> Result<RgbImage, GenError> {
        let h = req
            .prompt
            .bytes()
            .fold(req.seed, |acc, b| acc.wrapping_mul(1_099_511_628_211).wrapping_add(b as u64));
        let px = image::Rgb([h as u8, (h >> 8) as u8, (h >> 16) as u8]);
        Ok(RgbImage::from_pixel(req.width.max(1), req.height.max(1), px))
    }
}

impl ImageGenerator for StubImageGenerator {
    fn engine_id(&self) -> String {
        self.id.clone()
    }

    fn generate(&self, request: &GenerateRequest) -> Result<Vec<u8>, GenError> {
        let img = (self.paint)(request)?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| GenError::InvalidImage(e.to_string()))?;
        Ok(out.into_inner())
    }
}
