//! Outcome scoring, caption reward propagation and dataset selection.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sampler::{RawPool, TaskPool};
use crate::types::{CaptionReward, OffPolicyRecord, SystemPromptId, Trajectory};
use crate::verifier::Verifier;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RewardError {
    #[error("no gold answer for task `{0}`")]
    MissingGold(String),
    #[error("keep_n must be at least 1")]
    ZeroKeepN,
    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    InvalidAlpha(f64),
}

/// Mean of the outcome rewards as an exact fraction. `None` for an empty
/// slice: a caption without successful rollouts has no reward.
pub fn caption_reward(outcomes: &[u8]) -> Option<CaptionReward> {
    let correct = outcomes.iter().filter(|&&r| r == 1).count() as u32;
    CaptionReward::new(correct, outcomes.len() as u32)
}

/// Scores every trajectory against its task's gold answer and sets each
/// caption's reward to the mean over its successful rollouts.
///
/// `gold` overrides the answers stored with the tasks; tasks missing from
/// both are an error.
pub fn score_pool(
    pool: &RawPool,
    gold: &BTreeMap<String, String>,
    verifier: &Verifier,
) -> Result<RawPool, RewardError> {
    let tasks = pool
        .tasks
        .par_iter()
        .map(|task| {
            let answer = gold
                .get(&task.task.id)
                .map(String::as_str)
                .or_else(|| Some(task.task.gold_answer.as_str()).filter(|g| !g.trim().is_empty()))
                .ok_or_else(|| RewardError::MissingGold(task.task.id.clone()))?;
            Ok(score_task(task, answer, verifier))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RawPool { tasks, ..pool.clone() })
}

fn score_task(task: &TaskPool, gold: &str, verifier: &Verifier) -> TaskPool {
    let mut task = task.clone();
    for slot in &mut task.captions {
        for trajectory in &mut slot.trajectories {
            let extracted = verifier.extract_answer(&trajectory.text);
            let reward = match &extracted {
                Some(answer) if verifier.check_equivalence(answer, gold) => 1,
                _ => 0,
            };
            trajectory.extracted_answer = extracted;
            trajectory.outcome_reward = Some(reward);
        }
        let outcomes: Vec<u8> = slot
            .trajectories
            .iter()
            .filter_map(|t| t.outcome_reward)
            .collect();
        slot.caption.reward = caption_reward(&outcomes);
    }
    task
}

/// Position of a trajectory in its pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrajectoryRef {
    pub caption_index: u32,
    pub trajectory_index: u32,
    pub length_tokens: u64,
}

/// Why trajectories were left out of the dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejections {
    pub wrong_answer: u32,
    pub caption_below_alpha: u32,
    pub not_shortest: u32,
}

impl Rejections {
    pub fn total(&self) -> u32 {
        self.wrong_answer + self.caption_below_alpha + self.not_shortest
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSelection {
    pub task_id: String,
    pub eligible_count: u32,
    pub selected: Vec<TrajectoryRef>,
    pub rejections: Rejections,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub alpha: f64,
    pub keep_n: u32,
    pub tasks: Vec<TaskSelection>,
}

impl SelectionReport {
    pub fn selected_count(&self) -> usize {
        self.tasks.iter().map(|t| t.selected.len()).sum()
    }

    pub fn eligible_count(&self) -> usize {
        self.tasks.iter().map(|t| t.eligible_count as usize).sum()
    }

    pub fn rejections(&self) -> Rejections {
        self.tasks.iter().fold(Rejections::default(), |acc, t| Rejections {
            wrong_answer: acc.wrong_answer + t.rejections.wrong_answer,
            caption_below_alpha: acc.caption_below_alpha + t.rejections.caption_below_alpha,
            not_shortest: acc.not_shortest + t.rejections.not_shortest,
        })
    }
}

/// Builds the off-policy dataset from a scored pool.
///
/// Per task, a trajectory is eligible when it is correct and its caption's
/// reward is strictly above `alpha`. The `keep_n` shortest eligible
/// trajectories are kept, ordered by length with ties broken by caption
/// index and then trajectory index. Everything else is dropped and counted
/// in the report. Unscored trajectories count as wrong.
pub fn select(
    pool: &RawPool,
    alpha: f64,
    keep_n: u32,
) -> Result<(Vec<OffPolicyRecord>, SelectionReport), RewardError> {
    if keep_n == 0 {
        return Err(RewardError::ZeroKeepN);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RewardError::InvalidAlpha(alpha));
    }
    let mut records = Vec::new();
    let mut report = SelectionReport {
        alpha,
        keep_n,
        tasks: Vec::with_capacity(pool.tasks.len()),
    };
    for task in &pool.tasks {
        let mut rejections = Rejections::default();
        let mut eligible: Vec<&Trajectory> = Vec::new();
        for slot in &task.captions {
            let clears = slot.caption.reward.is_some_and(|r| r.exceeds(alpha));
            for t in &slot.trajectories {
                if !t.is_correct() {
                    rejections.wrong_answer += 1;
                } else if !clears {
                    rejections.caption_below_alpha += 1;
                } else {
                    eligible.push(t);
                }
            }
        }
        eligible.sort_by_key(|t| (t.length_tokens, t.caption_index, t.index));
        let kept = eligible.len().min(keep_n as usize);
        rejections.not_shortest = (eligible.len() - kept) as u32;
        let selected = eligible[..kept]
            .iter()
            .map(|t| TrajectoryRef {
                caption_index: t.caption_index,
                trajectory_index: t.index,
                length_tokens: t.length_tokens,
            })
            .collect();
        records.extend(eligible[..kept].iter().map(|t| OffPolicyRecord {
            task_id: task.task.id.clone(),
            query: task.task.query.clone(),
            image_ref: task.task.image_ref.clone(),
            caption_index: t.caption_index,
            trajectory: (*t).clone(),
            dataset_reward: 1,
            system_prompt_id: SystemPromptId::for_text(&t.text),
        }));
        report.tasks.push(TaskSelection {
            task_id: task.task.id.clone(),
            eligible_count: eligible.len() as u32,
            selected,
            rejections,
        });
    }
    Ok((records, report))
}
