//! Semi-off-policy collection: K captions per task from the vision backend,
//! then N reasoning rollouts per caption from the reasoning backend.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Backend, GenRequest, DESCRIPTION_CLOSE, DESCRIPTION_OPEN};
use crate::config::PipelineConfig;
use crate::rng::derive_seed;
use crate::types::{has_think_tag, Caption, TaskItem, Trajectory};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),
    #[error("caption is empty")]
    EmptyCaption,
    #[error("cannot build worker pool: {0}")]
    WorkerPool(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
}

pub const CAPTION_SYSTEM_PROMPT: &str =
    "You are a careful visual observer. You describe images completely and literally, \
     without guessing at anything you cannot see.";

pub const CAPTION_USER_PROMPT: &str = "Describe this image in as much detail as you can.\n\
- List every object, its count, and its position in the scene.\n\
- Describe the spatial layout and how the objects relate to one another.\n\
- Report colors, shapes, sizes, and other fine-grained visual details.\n\
- Transcribe any text, numbers, labels, symbols, or formulas exactly as they appear.\n\
- For charts, tables, or diagrams, give the axes, legends, values, and structure.\n\
Do not interpret the image beyond what is visible.";

pub const REASONING_SYSTEM_PROMPT: &str =
    "You are a vision-language assistant. You cannot see the image directly, but you are \
     given a detailed description of it. Reason as if you were looking at the image \
     yourself: refer to what you see rather than to the description, look back at the \
     image when you need to check a detail, and think step by step before answering.";

/// In-context example shipped with the reasoning prompt.
pub const REASONING_EXAMPLE: &str = "Example\n\
Image: a bar chart with three bars labelled A, B and C of heights 4, 7 and 2.\n\
Question: How much taller is the tallest bar than the shortest bar?\n\
Response: Looking at the chart, the tallest bar is B at 7 and the shortest is C at 2. \
Let me look back at the chart to confirm the labels: B is 7 and C is 2. \
So the difference is 7 - 2 = 5.\n\
The final answer is \\boxed{5}.";

/// The caption prompt. It is the same for every task and never contains
/// the task's query.
pub fn build_caption_prompt() -> PromptPair {
    PromptPair {
        system: CAPTION_SYSTEM_PROMPT.to_string(),
        user: CAPTION_USER_PROMPT.to_string(),
    }
}

/// The reasoning prompt: the caption stands in for the image and precedes
/// the query.
pub fn build_reasoning_prompt(query: &str, caption: &str) -> Result<PromptPair, SamplerError> {
    if caption.trim().is_empty() {
        return Err(SamplerError::EmptyCaption);
    }
    let user = format!(
        "{REASONING_EXAMPLE}\n\n\
         Now the real task. This is what you see in the image:\n\
         {DESCRIPTION_OPEN}\n{caption}\n{DESCRIPTION_CLOSE}\n\n\
         Question: {query}\n\
         Put your final answer in \\boxed{{}}."
    );
    Ok(PromptPair {
        system: REASONING_SYSTEM_PROMPT.to_string(),
        user,
    })
}

/// A generation failure for one slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotError {
    pub task_id: String,
    pub caption_index: u32,
    /// `None` when the caption itself failed (all its rollouts are missing).
    pub trajectory_index: Option<u32>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionSlot {
    pub caption: Caption,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskPool {
    pub task: TaskItem,
    pub captions: Vec<CaptionSlot>,
    pub errors: Vec<SlotError>,
}

impl TaskPool {
    pub fn trajectory_count(&self) -> usize {
        self.captions.iter().map(|c| c.trajectories.len()).sum()
    }

    /// Missing rollout slots: failed rollouts plus `n` per failed caption.
    pub fn missing_slots(&self, n: u32) -> usize {
        self.errors
            .iter()
            .map(|e| if e.trajectory_index.is_some() { 1 } else { n as usize })
            .sum()
    }

    /// A task is flagged when it produced no trajectory at all.
    pub fn is_flagged(&self) -> bool {
        self.trajectory_count() == 0
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.captions.iter().flat_map(|c| c.trajectories.iter())
    }
}

/// All captions and rollouts of one collection pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPool {
    pub k: u32,
    pub n: u32,
    pub seed: u64,
    pub tasks: Vec<TaskPool>,
}

impl RawPool {
    pub fn caption_count(&self) -> usize {
        self.tasks.iter().map(|t| t.captions.len()).sum()
    }

    pub fn trajectory_count(&self) -> usize {
        self.tasks.iter().map(TaskPool::trajectory_count).sum()
    }

    pub fn task(&self, id: &str) -> Option<&TaskPool> {
        self.tasks.iter().find(|t| t.task.id == id)
    }
}

pub fn caption_seed(seed: u64, task_id: &str, caption_index: u32) -> u64 {
    derive_seed(seed, &["caption", task_id, &caption_index.to_string()])
}

pub fn trajectory_seed(seed: u64, task_id: &str, caption_index: u32, index: u32) -> u64 {
    derive_seed(
        seed,
        &["trajectory", task_id, &caption_index.to_string(), &index.to_string()],
    )
}

/// Runs the collection loop.
///
/// Generation failures are recorded per slot and never abort the batch.
/// Each slot draws from its own seed, so results do not depend on task
/// order or on scheduling.
pub fn collect(
    dataset: &[TaskItem],
    config: &PipelineConfig,
    vision: &dyn Backend,
    reasoner: &dyn Backend,
) -> Result<RawPool, SamplerError> {
    if dataset.is_empty() {
        return Err(SamplerError::EmptyDataset);
    }
    let mut seen = BTreeSet::new();
    for task in dataset {
        if !seen.insert(task.id.as_str()) {
            return Err(SamplerError::DuplicateTask(task.id.clone()));
        }
    }
    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism as usize)
        .build()
        .map_err(|e| SamplerError::WorkerPool(e.to_string()))?;

    let caption_prompt = build_caption_prompt();
    let caption_jobs: Vec<(usize, u32)> = (0..dataset.len())
        .flat_map(|t| (0..config.k).map(move |k| (t, k)))
        .collect();
    let caption_results: Vec<_> = workers.install(|| {
        caption_jobs
            .par_iter()
            .map(|&(t, k)| {
                let task = &dataset[t];
                let request = GenRequest {
                    system_prompt: caption_prompt.system.clone(),
                    user_prompt: caption_prompt.user.clone(),
                    image_ref: Some(task.image_ref.clone()),
                    model: None,
                    temperature: config.temperature,
                    max_tokens: config.max_gen_tokens,
                    seed: caption_seed(config.seed, &task.id, k),
                };
                vision.generate(&request)
            })
            .collect()
    });

    let mut tasks: Vec<TaskPool> = dataset
        .iter()
        .map(|task| TaskPool {
            task: task.clone(),
            captions: Vec::new(),
            errors: Vec::new(),
        })
        .collect();
    for (&(t, k), result) in caption_jobs.iter().zip(caption_results) {
        let task_id = dataset[t].id.clone();
        match result {
            Ok(resp) if !resp.text.trim().is_empty() => tasks[t].captions.push(CaptionSlot {
                caption: Caption {
                    task_id,
                    index: k,
                    text: resp.text,
                    reward: None,
                    backend_id: resp.backend_id,
                },
                trajectories: Vec::new(),
            }),
            Ok(_) => tasks[t].errors.push(SlotError {
                task_id,
                caption_index: k,
                trajectory_index: None,
                message: "empty caption".into(),
            }),
            Err(e) => tasks[t].errors.push(SlotError {
                task_id,
                caption_index: k,
                trajectory_index: None,
                message: e.to_string(),
            }),
        }
    }

    let rollout_jobs: Vec<(usize, usize, u32)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(t, pool)| {
            (0..pool.captions.len()).flat_map(move |c| (0..config.n).map(move |i| (t, c, i)))
        })
        .collect();
    let rollout_results: Vec<_> = workers.install(|| {
        rollout_jobs
            .par_iter()
            .map(|&(t, c, i)| {
                let task = &tasks[t].task;
                let caption = &tasks[t].captions[c].caption;
                let prompt = build_reasoning_prompt(&task.query, &caption.text)
                    .expect("captions are non-empty");
                let request = GenRequest {
                    system_prompt: prompt.system,
                    user_prompt: prompt.user,
                    image_ref: None,
                    model: task.reasoner_model.clone(),
                    temperature: config.temperature,
                    max_tokens: config.max_gen_tokens,
                    seed: trajectory_seed(config.seed, &task.id, caption.index, i),
                };
                reasoner.generate(&request)
            })
            .collect()
    });

    for (&(t, c, i), result) in rollout_jobs.iter().zip(rollout_results) {
        let task_id = tasks[t].task.id.clone();
        let caption_index = tasks[t].captions[c].caption.index;
        match result {
            Ok(resp) => {
                let trajectory = Trajectory {
                    task_id,
                    caption_index,
                    index: i,
                    length_tokens: config.tokenization_rule.length(&resp.text, resp.token_count),
                    has_think_tag: has_think_tag(&resp.text),
                    text: resp.text,
                    extracted_answer: None,
                    outcome_reward: None,
                    backend_id: resp.backend_id,
                };
                tasks[t].captions[c].trajectories.push(trajectory);
            }
            Err(e) => tasks[t].errors.push(SlotError {
                task_id,
                caption_index,
                trajectory_index: Some(i),
                message: e.to_string(),
            }),
        }
    }

    for pool in &tasks {
        if pool.is_flagged() {
            log::warn!("task `{}` produced no trajectories", pool.task.id);
        }
    }
    Ok(RawPool {
        k: config.k,
        n: config.n,
        seed: config.seed,
        tasks,
    })
}
