//! Pipeline configuration.
//!
//! The on-disk format is a flat `key = value` file (TOML syntax, no tables).
//! Every key is optional; omitted keys take the defaults below. Validation
//! failures always name the offending key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error{}: {message}", key.as_ref().map(|k| format!(" at key `{k}`")).unwrap_or_default())]
    Parse { key: Option<String>, message: String },
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

impl ConfigError {
    /// The key the error refers to, when one could be identified.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Parse { key, .. } => key.as_deref(),
            ConfigError::Invalid { key, .. } => Some(key),
        }
    }
}

/// How trajectory lengths are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenizationRule {
    /// Number of maximal non-whitespace runs.
    #[default]
    Whitespace,
    /// Completion token count reported by the backend, falling back to
    /// whitespace runs when the backend reports nothing.
    BackendReported,
}

impl TokenizationRule {
    pub fn length(self, text: &str, reported: Option<u64>) -> u64 {
        match (self, reported) {
            (TokenizationRule::BackendReported, Some(n)) => n,
            _ => count_tokens(text, TokenizationRule::Whitespace),
        }
    }
}

/// Token count of `text` under `rule`.
///
/// Without a backend report both rules reduce to counting whitespace runs.
pub fn count_tokens(text: &str, _rule: TokenizationRule) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Stub,
    Remote,
}

/// Answer function the synthetic world asks about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GoldFn {
    #[default]
    Sum,
    Max,
    /// Number of non-zero attributes.
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRuleKind {
    /// Plain gradient ascent.
    #[default]
    Sgd,
    /// Decoupled-weight-decay Adam.
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Captions sampled per task.
    #[serde(alias = "K")]
    pub k: u32,
    /// Reasoning rollouts per caption.
    #[serde(alias = "N")]
    pub n: u32,
    /// Caption-reward threshold; a caption must score strictly above it.
    pub alpha: f64,
    /// Number of shortest eligible trajectories kept per task.
    pub keep_n: u32,
    pub max_gen_tokens: u32,
    pub seed: u64,
    /// Maximum number of in-flight generation requests.
    pub parallelism: u32,
    pub tokenization_rule: TokenizationRule,
    pub temperature: f64,

    pub backend: BackendKind,
    pub endpoint: Option<String>,
    pub vision_model: String,
    pub reasoner_model: String,
    /// Environment variable holding the bearer token for the endpoint.
    pub api_key_env: String,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub request_timeout_ms: u64,

    // synthetic world
    pub num_tasks: u32,
    pub world_attributes: u32,
    pub caption_fidelity: f64,
    pub reasoner_skill: f64,
    pub gold_fn: GoldFn,

    pub verifier_rel_tol: f64,

    // toy training
    pub learning_rate: f64,
    pub rounds: u32,
    pub update_rule: UpdateRuleKind,
    pub weight_decay: f64,
    /// 0 means one batch holding every selected record.
    pub minibatch_size: u32,
    pub theta_cap: f64,
    /// Magnitude of the one-hot task contexts seen by the toy policy.
    pub context_scale: f64,
    pub window: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 8,
            n: 8,
            alpha: 0.75,
            keep_n: 1,
            max_gen_tokens: 32768,
            seed: 7,
            parallelism: 4,
            tokenization_rule: TokenizationRule::Whitespace,
            temperature: 1.0,
            backend: BackendKind::Stub,
            endpoint: None,
            vision_model: "vision".to_string(),
            reasoner_model: "reasoner".to_string(),
            api_key_env: "SOPHIA_API_KEY".to_string(),
            max_attempts: 3,
            backoff_ms: 1000,
            request_timeout_ms: 600_000,
            num_tasks: 8,
            world_attributes: 4,
            caption_fidelity: 0.9,
            reasoner_skill: 0.9,
            gold_fn: GoldFn::Sum,
            verifier_rel_tol: 1e-4,
            learning_rate: 0.1,
            rounds: 50,
            update_rule: UpdateRuleKind::Adamw,
            weight_decay: 0.05,
            minibatch_size: 0,
            theta_cap: 50.0,
            context_scale: 1.0,
            window: 2,
        }
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("alpha", format!("{} is not in (0, 1)", self.alpha)));
        }
        if self.k < 1 {
            return Err(invalid("k", "must be at least 1"));
        }
        if self.n < 1 {
            return Err(invalid("n", "must be at least 1"));
        }
        if self.keep_n < 1 {
            return Err(invalid("keep_n", "must be at least 1"));
        }
        if self.max_gen_tokens < 1 {
            return Err(invalid("max_gen_tokens", "must be at least 1"));
        }
        if self.parallelism < 1 {
            return Err(invalid("parallelism", "must be at least 1"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be a finite nonnegative number"));
        }
        if self.max_attempts < 1 {
            return Err(invalid("max_attempts", "must be at least 1"));
        }
        if self.backend == BackendKind::Remote && self.endpoint.is_none() {
            return Err(invalid("endpoint", "required when backend = \"remote\""));
        }
        if self.num_tasks < 1 {
            return Err(invalid("num_tasks", "must be at least 1"));
        }
        if self.world_attributes < 1 {
            return Err(invalid("world_attributes", "must be at least 1"));
        }
        for (key, value) in [
            ("caption_fidelity", self.caption_fidelity),
            ("reasoner_skill", self.reasoner_skill),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(invalid(key, format!("{value} is not in [0, 1]")));
            }
        }
        if !(self.verifier_rel_tol >= 0.0 && self.verifier_rel_tol.is_finite()) {
            return Err(invalid("verifier_rel_tol", "must be a finite nonnegative number"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be a finite nonnegative number"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay", "must be a finite nonnegative number"));
        }
        if !(self.theta_cap > 0.0) {
            return Err(invalid("theta_cap", "must be positive"));
        }
        if !(self.context_scale > 0.0 && self.context_scale.is_finite()) {
            return Err(invalid("context_scale", "must be a finite positive number"));
        }
        if self.window < 1 {
            return Err(invalid("window", "must be at least 1"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            key: e.span().and_then(|span| key_at(text, span.start)),
            message: e.message().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Canonical serialized form, used for hashing and for writing the
    /// effective config next to run outputs.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides on top of this config and validates the
    /// result. Values use TOML syntax; anything that does not parse as a
    /// TOML value is taken as a bare string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(&self.to_toml_string()).expect("config serializes as a table");
        for (key, raw) in overrides {
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            let key = match key.as_str() {
                "K" => "k",
                "N" => "n",
                other => other,
            };
            table.insert(key.to_string(), value);
        }
        Self::from_toml_str(&toml::to_string(&table).expect("table serializes"))
    }

    /// Hex SHA-256 of the canonical serialized form.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Best-effort recovery of the key on the line containing `offset`.
fn key_at(text: &str, offset: usize) -> Option<String> {
    let start = text[..offset.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].lines().next()?;
    let (key, _) = line.split_once('=')?;
    let key = key.trim().trim_matches('"');
    (!key.is_empty()).then(|| key.to_string())
}

/// Loads and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    PipelineConfig::from_toml_str(&text)
}
