//! Request/response contracts for the external models.
//!
//! Every backend is a synchronous client: one JSON request in, one JSON
//! response out. Transport (HTTP, subprocess, in-process) is the
//! implementor's business. Closures with the right signature implement each
//! trait, which keeps test doubles short.

pub mod mock;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::TemplateRole;
use crate::trainer::DetectorJobSpec;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("backend reported failure: {0}")]
    Failed(String),
}

/// Captioner and prompt-generator request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRequest {
    pub template_role: TemplateRole,
    pub rendered_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vehicle_name: Option<String>,
    /// Number of texts wanted, for list-producing calls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

/// Either a single `text` or a list of `texts`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texts: Option<Vec<String>>,
    #[serde(default)]
    pub model_id: String,
}

impl TextResponse {
    pub fn single(text: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            texts: None,
            model_id: model_id.into(),
        }
    }

    pub fn list(texts: Vec<String>, model_id: impl Into<String>) -> Self {
        Self {
            text: None,
            texts: Some(texts),
            model_id: model_id.into(),
        }
    }
}

pub trait TextBackend: Send + Sync {
    fn complete(&self, request: &TextRequest) -> Result<TextResponse, BackendError>;
}

impl<F> TextBackend for F
where
    F: Fn(&TextRequest) -> Result<TextResponse, BackendError> + Send + Sync,
{
    fn complete(&self, request: &TextRequest) -> Result<TextResponse, BackendError> {
        self(request)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRequest {
    pub prompt: String,
    pub adapter_uri: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_map_uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioning_strength: Option<f64>,
    /// Where the orchestrator would like the image written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_uri: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResponse {
    pub image_uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

pub trait ImageSynthesizer: Send + Sync {
    fn synthesize(&self, request: &SynthesisRequest) -> Result<SynthesisResponse, BackendError>;
}

impl<F> ImageSynthesizer for F
where
    F: Fn(&SynthesisRequest) -> Result<SynthesisResponse, BackendError> + Send + Sync,
{
    fn synthesize(&self, request: &SynthesisRequest) -> Result<SynthesisResponse, BackendError> {
        self(request)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenVocabRequest {
    pub image_uri: String,
    pub phrase: String,
}

/// One candidate box, corners `[x_min, y_min, x_max, y_max]` in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Detections in descending confidence order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpenVocabResponse {
    pub detections: Vec<RawDetection>,
}

pub trait OpenVocabDetector: Send + Sync {
    fn detect(&self, request: &OpenVocabRequest) -> Result<OpenVocabResponse, BackendError>;
}

impl<F> OpenVocabDetector for F
where
    F: Fn(&OpenVocabRequest) -> Result<OpenVocabResponse, BackendError> + Send + Sync,
{
    fn detect(&self, request: &OpenVocabRequest) -> Result<OpenVocabResponse, BackendError> {
        self(request)
    }
}

/// Where a finished detector run left its outputs: per-epoch history as JSON
/// lines and test-split predictions as JSON lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorRunOutput {
    pub history_uri: PathBuf,
    pub predictions_uri: PathBuf,
}

pub trait DetectorBackend: Send + Sync {
    fn train(&self, spec: &DetectorJobSpec) -> Result<DetectorRunOutput, BackendError>;
}

impl<F> DetectorBackend for F
where
    F: Fn(&DetectorJobSpec) -> Result<DetectorRunOutput, BackendError> + Send + Sync,
{
    fn train(&self, spec: &DetectorJobSpec) -> Result<DetectorRunOutput, BackendError> {
        self(spec)
    }
}

/// Retry budget for per-record backend calls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts per record, including the first.
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3 }
    }
}

impl RetryPolicy {
    pub fn no_retry() -> Self {
        Self { max_attempts: 1 }
    }

    /// Runs `call` until it succeeds or the budget is spent. Returns the last
    /// error together with the number of attempts made.
    pub fn run<T>(
        &self,
        mut call: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, (BackendError, u32)> {
        let attempts = self.max_attempts.max(1);
        let mut last = None;
        for _ in 0..attempts {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) => last = Some(e),
            }
        }
        Err((last.expect("at least one attempt"), attempts))
    }
}
