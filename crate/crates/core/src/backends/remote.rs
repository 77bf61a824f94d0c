//! Client for OpenAI-style chat-completion endpoints.

use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{Backend, BackendError, GenRequest, GenResponse};

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            timeout: Duration::from_secs(600),
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    id: String,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        let id = format!("remote:{}", config.model);
        Self { config, agent, id }
    }

    /// The JSON body sent for `request`. Identical across retries.
    pub fn request_body(&self, request: &GenRequest) -> String {
        let user_content = match &request.image_ref {
            None => json!(request.user_prompt),
            Some(image) => json!([
                {"type": "text", "text": request.user_prompt},
                {"type": "image_url", "image_url": {"url": image}},
            ]),
        };
        let body = json!({
            "model": request.model.as_deref().unwrap_or(&self.config.model),
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": user_content},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "seed": request.seed,
        });
        body.to_string()
    }

    fn attempt(&self, body: &str) -> Result<(String, Option<u64>), BackendError> {
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = req
            .send(body)
            .map_err(|e| BackendError::Connection(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Connection(format!("reading body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        parse_completion(&text)
    }
}

/// Pulls the first choice's message content (and the completion token count
/// when reported) out of a response body.
pub(crate) fn parse_completion(body: &str) -> Result<(String, Option<u64>), BackendError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedBody(format!("not JSON: {e}")))?;
    let content = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::MalformedBody("missing choices[0].message.content".into()))?;
    let tokens = value.pointer("/usage/completion_tokens").and_then(Value::as_u64);
    Ok((content.to_string(), tokens))
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenRequest) -> Result<GenResponse, BackendError> {
        if request.max_tokens < 1 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        let body = self.request_body(request);
        let started = Instant::now();
        let mut backoff = self.config.initial_backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok((text, token_count)) => {
                    return Ok(GenResponse {
                        text,
                        token_count,
                        backend_id: self.id.clone(),
                        latency_ms: started.elapsed().as_millis() as u64,
                    })
                }
                Err(err) if err.is_retryable() && attempts < self.config.max_attempts => {
                    log::warn!("{}: attempt {attempts} failed ({err}); retrying in {backoff:?}", self.id);
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
                Err(err) if err.is_retryable() && attempts > 1 => {
                    return Err(BackendError::RetriesExhausted {
                        attempts,
                        last: Box::new(err),
                    })
                }
                Err(err) => return Err(err),
            }
        }
    }
}
