//! Stage wiring: backends from config, the synthetic dataset, run
//! manifests, training-data export and the all-stub end-to-end run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backends::{
    Backend, RemoteBackend, RemoteConfig, StubReasonerBackend, StubVisionBackend, SyntheticWorld,
    WorldConfig,
};
use crate::config::{BackendKind, ConfigError, PipelineConfig};
use crate::optimizer::{train, Curriculum, RoundLog, TrainError};
use crate::records::{self, RecordError};
use crate::rewards::{score_pool, select, RewardError, SelectionReport};
use crate::sampler::{collect, RawPool, SamplerError};
use crate::types::{OffPolicyRecord, SystemPromptId, TaskItem};
use crate::verifier::Verifier;
use crate::ENGINE_VERSION;

pub const SLOW_THINKING_SYSTEM_PROMPT: &str =
    "You are a helpful assistant. Before answering, think the problem through step by step \
     inside <think> and </think> tags, looking back at the image whenever a detail matters. \
     Then give the final answer.";
pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a helpful assistant.";

pub fn system_prompt(id: SystemPromptId) -> &'static str {
    match id {
        SystemPromptId::SlowThinking => SLOW_THINKING_SYSTEM_PROMPT,
        SystemPromptId::Default => DEFAULT_SYSTEM_PROMPT,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("sample: {0}")]
    Sample(#[from] SamplerError),
    #[error("score/select: {0}")]
    Reward(#[from] RewardError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("records: {0}")]
    Record(#[from] RecordError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown export format `{0}` (expected `jsonl`)")]
    UnknownFormat(String),
}

pub fn world_config(config: &PipelineConfig) -> WorldConfig {
    WorldConfig {
        seed: config.seed,
        num_attributes: config.world_attributes as usize,
        caption_fidelity: config.caption_fidelity,
        reasoner_skill: config.reasoner_skill,
        gold_fn: config.gold_fn,
    }
}

/// `config.num_tasks` synthetic tasks with consistent gold answers.
pub fn synthetic_dataset(config: &PipelineConfig) -> (SyntheticWorld, Vec<TaskItem>) {
    let mut world = SyntheticWorld::new(world_config(config));
    let tasks = (0..config.num_tasks)
        .map(|i| {
            let image_ref = format!("img-{i}");
            world.register(&image_ref);
            TaskItem::new(
                format!("task-{i:03}"),
                image_ref.clone(),
                world.query(),
                world.gold_answer(&image_ref).expect("just registered").to_string(),
            )
        })
        .collect();
    (world, tasks)
}

/// A synthetic world holding the images of `tasks`.
pub fn world_for(config: &PipelineConfig, tasks: &[TaskItem]) -> SyntheticWorld {
    SyntheticWorld::with_images(world_config(config), tasks.iter().map(|t| t.image_ref.as_str()))
}

pub struct BackendPair {
    pub vision: Box<dyn Backend>,
    pub reasoner: Box<dyn Backend>,
}

impl BackendPair {
    pub fn ids(&self) -> Vec<String> {
        vec![self.vision.id().to_string(), self.reasoner.id().to_string()]
    }
}

/// Builds the configured backends. The stub pair serves the images of
/// `tasks`.
pub fn backends_for(config: &PipelineConfig, tasks: &[TaskItem]) -> BackendPair {
    match config.backend {
        BackendKind::Stub => {
            let world = Arc::new(world_for(config, tasks));
            BackendPair {
                vision: Box::new(StubVisionBackend::new(world.clone())),
                reasoner: Box::new(StubReasonerBackend::new(world)),
            }
        }
        BackendKind::Remote => {
            let remote = |model: &str| {
                let mut rc = RemoteConfig::new(config.endpoint.clone().unwrap_or_default(), model);
                rc.api_key = std::env::var(&config.api_key_env).ok();
                rc.max_attempts = config.max_attempts;
                rc.initial_backoff = Duration::from_millis(config.backoff_ms);
                rc.timeout = Duration::from_millis(config.request_timeout_ms);
                Box::new(RemoteBackend::new(rc)) as Box<dyn Backend>
            };
            BackendPair {
                vision: remote(&config.vision_model),
                reasoner: remote(&config.reasoner_model),
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub tasks: usize,
    pub captions: usize,
    pub trajectories: usize,
    pub slot_errors: usize,
    pub eligible: usize,
    pub selected: usize,
}

impl RunCounts {
    pub fn from_pool(pool: &RawPool) -> Self {
        Self {
            tasks: pool.tasks.len(),
            captions: pool.caption_count(),
            trajectories: pool.trajectory_count(),
            slot_errors: pool.tasks.iter().map(|t| t.errors.len()).sum(),
            ..Self::default()
        }
    }

    pub fn with_selection(mut self, report: &SelectionReport) -> Self {
        self.eligible = report.eligible_count();
        self.selected = report.selected_count();
        self
    }
}

/// Provenance written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub stage_timings_ms: BTreeMap<String, u64>,
    pub counts: RunCounts,
    pub backend_ids: Vec<String>,
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &PipelineConfig) -> Self {
        let mut notes = Vec::new();
        if config.backend == BackendKind::Remote {
            notes.push(
                "behavior-policy probabilities are not available from remote backends; \
                 the importance-ratio bias was not measured for this run"
                    .to_string(),
            );
        }
        Self {
            engine_version: ENGINE_VERSION.to_string(),
            command: command.to_string(),
            config_hash: config.config_hash(),
            seed: config.seed,
            stage_timings_ms: BTreeMap::new(),
            counts: RunCounts::default(),
            backend_ids: Vec::new(),
            notes,
        }
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let started = Instant::now();
        let out = f();
        self.stage_timings_ms
            .insert(stage.to_string(), started.elapsed().as_millis() as u64);
        out
    }

    /// Checks `selected <= trajectories <= tasks * k * n`.
    pub fn counts_reconcile(&self, k: u32, n: u32) -> bool {
        let c = &self.counts;
        c.selected <= c.eligible
            && c.eligible <= c.trajectories
            && c.trajectories <= c.tasks * k as usize * n as usize
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

/// One line of exported training data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportExample {
    pub task_id: String,
    pub system_prompt_id: SystemPromptId,
    pub system_prompt: String,
    pub image_ref: String,
    /// The bare query; no caption and no reasoning.
    pub user: String,
    pub assistant: String,
}

impl From<&OffPolicyRecord> for ExportExample {
    fn from(r: &OffPolicyRecord) -> Self {
        let id = SystemPromptId::for_text(&r.trajectory.text);
        Self {
            task_id: r.task_id.clone(),
            system_prompt_id: id,
            system_prompt: system_prompt(id).to_string(),
            image_ref: r.image_ref.clone(),
            user: r.query.clone(),
            assistant: r.trajectory.text.clone(),
        }
    }
}

pub fn export_records(records: &[OffPolicyRecord], format: &str) -> Result<String, PipelineError> {
    match format {
        "jsonl" => {
            let examples: Vec<ExportExample> = records.iter().map(ExportExample::from).collect();
            Ok(records::to_jsonl(&examples))
        }
        other => Err(PipelineError::UnknownFormat(other.to_string())),
    }
}

/// File names used by [`run_e2e_stub`].
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const DATASET: &str = "dataset.jsonl";
    pub const POOL: &str = "pool.jsonl";
    pub const SCORED: &str = "scored.jsonl";
    pub const RECORDS: &str = "records.jsonl";
    pub const REPORT: &str = "report.json";
    pub const HISTORY: &str = "history.jsonl";
    pub const POLICY: &str = "policy.json";
    pub const MANIFEST: &str = "manifest.json";
}

#[derive(Debug, Clone)]
pub struct E2eSummary {
    pub manifest: RunManifest,
    pub history: Vec<RoundLog>,
    pub out_dir: PathBuf,
}

/// Sample, score, select and train against the stub backends, then write
/// every artifact into `out_dir`.
///
/// Nothing is written unless every stage succeeds.
pub fn run_e2e_stub(config: &PipelineConfig, out_dir: &Path) -> Result<E2eSummary, PipelineError> {
    config.validate()?;
    let config = PipelineConfig {
        backend: BackendKind::Stub,
        ..config.clone()
    };
    let mut manifest = RunManifest::new("e2e-stub", &config);
    let (world, tasks) = synthetic_dataset(&config);
    let world = Arc::new(world);
    let vision = StubVisionBackend::new(world.clone());
    let reasoner = StubReasonerBackend::new(world);
    manifest.backend_ids = vec![vision.id().to_string(), reasoner.id().to_string()];
    let verifier = Verifier::with_tolerance(config.verifier_rel_tol);

    let pool = manifest.time("sample", || collect(&tasks, &config, &vision, &reasoner))?;
    let scored = manifest.time("score", || score_pool(&pool, &BTreeMap::new(), &verifier))?;
    let (selected, report) = manifest.time("select", || select(&scored, config.alpha, config.keep_n))?;
    let curriculum = Curriculum::one_hot(tasks.clone(), config.context_scale);
    let outcome = manifest.time("train", || train(&config, &curriculum, &vision, &reasoner))?;
    manifest.counts = RunCounts::from_pool(&pool).with_selection(&report);

    std::fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let write = |name: &str, contents: String| -> Result<(), PipelineError> {
        let path = out_dir.join(name);
        std::fs::write(&path, contents).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    write(files::CONFIG, config.to_toml_string())?;
    write(files::DATASET, records::to_jsonl(&tasks))?;
    write(files::POOL, records::to_jsonl(&records::pool_lines(&pool)))?;
    write(files::SCORED, records::to_jsonl(&records::pool_lines(&scored)))?;
    write(files::RECORDS, records::to_jsonl(&selected))?;
    write(files::REPORT, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    write(files::HISTORY, records::to_jsonl(&outcome.history))?;
    write(files::POLICY, outcome.state.policy.to_json() + "\n")?;
    write(files::MANIFEST, manifest.to_json())?;
    Ok(E2eSummary {
        manifest,
        history: outcome.history,
        out_dir: out_dir.to_path_buf(),
    })
}
