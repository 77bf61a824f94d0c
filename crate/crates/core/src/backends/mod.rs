//! Text-generation backends.
//!
//! Two implementations share the [`Backend`] trait: a client for remote
//! chat-completion endpoints and a deterministic synthetic world whose
//! every downstream quantity can be enumerated.

mod remote;
mod stub;

use serde::{Deserialize, Serialize};

pub use remote::{RemoteBackend, RemoteConfig};
pub use stub::{
    parse_caption, render_caption, stub_reasoner, stub_vision_caption, StubReasonerBackend,
    StubVisionBackend, SyntheticWorld, WorldConfig, DECOY_RANGE, DESCRIPTION_CLOSE,
    DESCRIPTION_OPEN, LOOK_BACK_LINE, MAX_LOOK_BACKS, THINK_STYLE_PROB, VALUE_RANGE,
};

/// One generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    /// Image attached to the user turn, for vision requests.
    pub image_ref: Option<String>,
    /// Overrides the backend's configured model name.
    pub model: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenResponse {
    pub text: String,
    pub token_count: Option<u64>,
    pub backend_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response body: {0}")]
    MalformedBody(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<BackendError>,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown image `{0}`")]
    UnknownImage(String),
}

impl BackendError {
    /// Whether another attempt could plausibly succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Connection(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn generate(&self, request: &GenRequest) -> Result<GenResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn generate(&self, request: &GenRequest) -> Result<GenResponse, BackendError> {
        (**self).generate(request)
    }
}
