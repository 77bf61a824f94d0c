//! Semi-off-policy reasoning data loop.
//!
//! The engine samples image descriptions from a vision model, feeds each
//! description to a reasoning model, verifies the final answers, propagates
//! the outcome back to the descriptions and keeps the shortest correct
//! trajectories whose description cleared a reward threshold. The selected
//! records drive an off-policy policy-gradient update.
//!
//! At desk scale everything runs against a deterministic synthetic world and
//! a small autoregressive softmax policy whose sequence space can be
//! enumerated exactly, so the importance-sampling bias bound and the
//! gradient estimator can be checked without statistical slack.

pub mod backends;
pub mod config;
pub mod optimizer;
pub mod pipeline;
pub mod policy;
pub mod records;
pub mod rewards;
pub mod rng;
pub mod sampler;
pub mod types;
pub mod verifier;

pub use config::{count_tokens, load_config, PipelineConfig, TokenizationRule};
pub use types::{Caption, CaptionReward, OffPolicyRecord, SystemPromptId, TaskItem, Trajectory};
pub use verifier::Verifier;

/// Version string recorded in run manifests.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
