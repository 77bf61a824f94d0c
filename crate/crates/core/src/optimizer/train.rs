//! Toy training loop over the synthetic world.
//!
//! Each task gets its own context vector. A selected trajectory becomes a
//! short token sequence: one [`RECHECK`] token per look-back line, then a
//! tens token and a units token for the extracted answer. Tens and units
//! use disjoint tokens so that a linear policy can learn the digit order
//! from its token window while the task context picks the values. Evaluation renders
//! sequences back into text and scores them with the verifier, so the
//! policy is rewarded exactly as the data loop would reward it. The success
//! probability is computed exactly by walking only the prefixes that can
//! still decode to the gold answer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{cosine_lr, policy_gradient, OptimizerError, ToyRecord, UpdateRule};
use crate::backends::{Backend, LOOK_BACK_LINE};
use crate::config::{PipelineConfig, UpdateRuleKind};
use crate::policy::ToyPolicy;
use crate::rewards::{score_pool, select, RewardError};
use crate::rng;
use crate::sampler::{collect, SamplerError};
use crate::types::{OffPolicyRecord, TaskItem, Trajectory};
use crate::verifier::{parse_answer, Verifier};
use num_traits::Signed;

/// Units digits are tokens `0..=9`; tens digit `t` is `TENS_BASE + t`.
pub const TENS_BASE: usize = 10;
/// Number of tens tokens, so answers up to 39 are representable.
pub const TENS_TOKENS: usize = 4;
/// Stands for one look-back line.
pub const RECHECK: usize = TENS_BASE + TENS_TOKENS;
pub const CURRICULUM_VOCAB: usize = RECHECK + 1;
pub const CURRICULUM_MAX_LEN: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("sampling failed: {0}")]
    Sample(#[from] SamplerError),
    #[error("scoring or selection failed: {0}")]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("diverged at round {round}: mean |theta| = {mean_abs} exceeds cap {cap}")]
    Diverged { round: u32, mean_abs: f64, cap: f64 },
    #[error("no context for task `{0}`")]
    UnknownTask(String),
}

/// Tasks paired with the context vectors the policy sees.
#[derive(Debug, Clone)]
pub struct Curriculum {
    tasks: Vec<TaskItem>,
    contexts: BTreeMap<String, Vec<f64>>,
}

impl Curriculum {
    /// One-hot task contexts with the hot entry set to `scale`.
    pub fn one_hot(tasks: Vec<TaskItem>, scale: f64) -> Self {
        let n = tasks.len();
        let contexts = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut v = vec![0.0; n];
                v[i] = scale;
                (t.id.clone(), v)
            })
            .collect();
        Self { tasks, contexts }
    }

    pub fn tasks(&self) -> &[TaskItem] {
        &self.tasks
    }

    pub fn context(&self, task_id: &str) -> Option<&[f64]> {
        self.contexts.get(task_id).map(Vec::as_slice)
    }

    pub fn context_dim(&self) -> usize {
        self.tasks.len()
    }

    /// A uniform policy sized for this curriculum.
    pub fn initial_policy(&self, window: usize) -> ToyPolicy {
        ToyPolicy::new(CURRICULUM_VOCAB, CURRICULUM_MAX_LEN, self.context_dim(), window)
            .expect("curriculum vocabulary is non-empty")
    }

    /// Toy records for the selected trajectories. Records whose answer does
    /// not fit the toy vocabulary are skipped.
    pub fn toy_records(&self, records: &[OffPolicyRecord]) -> Result<Vec<ToyRecord>, TrainError> {
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            let context = self
                .context(&r.task_id)
                .ok_or_else(|| TrainError::UnknownTask(r.task_id.clone()))?;
            if let Some(sequence) = encode_trajectory(&r.trajectory) {
                out.push(ToyRecord {
                    context: context.to_vec(),
                    sequence,
                    reward: f64::from(r.dataset_reward),
                });
            }
        }
        Ok(out)
    }
}

/// Look-back count as [`RECHECK`] tokens, then tens and units tokens.
/// `None` for answers that are not integers in `0..40`.
pub fn encode_trajectory(trajectory: &Trajectory) -> Option<Vec<usize>> {
    let answer = trajectory.extracted_answer.as_deref()?.trim();
    if answer.is_empty() || !answer.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let value: usize = answer.parse().ok()?;
    if value >= TENS_TOKENS * 10 {
        return None;
    }
    let rechecks = trajectory.text.matches(LOOK_BACK_LINE).count();
    let mut seq = vec![RECHECK; rechecks];
    seq.extend([TENS_BASE + value / 10, value % 10]);
    (seq.len() <= CURRICULUM_MAX_LEN).then_some(seq)
}

/// The digit a token writes, if any.
fn digit_of(token: usize) -> Option<char> {
    match token {
        t if t < TENS_BASE => Some(char::from(b'0' + t as u8)),
        t if t < RECHECK => Some(char::from(b'0' + (t - TENS_BASE) as u8)),
        _ => None,
    }
}

/// Renders a toy sequence as a reasoning text.
pub fn decode_sequence(sequence: &[usize]) -> String {
    let mut text = String::new();
    let mut digits = String::new();
    for &token in sequence {
        if token == RECHECK {
            text.push_str(LOOK_BACK_LINE);
            text.push('\n');
        } else if let Some(d) = digit_of(token) {
            digits.push(d);
        }
    }
    if digits.is_empty() {
        text.push_str("I cannot tell from the image.");
    } else {
        text.push_str(&format!("The final answer is \\boxed{{{digits}}}."));
    }
    text
}

/// Decimal digits of `gold` when it is a nonnegative integer. No digit
/// string can match any other answer.
fn gold_digits(gold: &str) -> Option<String> {
    let value = parse_answer(gold).value()?;
    (value.is_integer() && !value.numer().is_negative()).then(|| value.numer().to_string())
}

/// Whether some continuation of `prefix` can decode to `gold`.
fn viable(prefix: &[usize], gold: &str) -> bool {
    let digits: String = prefix.iter().filter_map(|&t| digit_of(t)).collect();
    let significant = digits.trim_start_matches('0');
    if gold == "0" {
        significant.is_empty()
    } else {
        gold.starts_with(significant)
    }
}

/// Exact probability that a sequence drawn from `policy` scores 1 against
/// `gold` under `verifier`.
pub fn success_probability(
    policy: &ToyPolicy,
    context: &[f64],
    gold: &str,
    verifier: &Verifier,
) -> Result<f64, TrainError> {
    let Some(digits) = gold_digits(gold) else {
        return Ok(0.0);
    };
    let mut prefix = Vec::with_capacity(policy.max_len());
    walk(policy, context, gold, &digits, verifier, &mut prefix)
}

fn walk(
    policy: &ToyPolicy,
    context: &[f64],
    gold: &str,
    digits: &str,
    verifier: &Verifier,
    prefix: &mut Vec<usize>,
) -> Result<f64, TrainError> {
    let score = |p: &[usize]| f64::from(verifier.score_trajectory(&decode_sequence(p), gold));
    if prefix.len() == policy.max_len() {
        return Ok(score(prefix));
    }
    let probs = policy.step_probs(context, prefix).map_err(OptimizerError::from)?;
    let mut total = probs[policy.stop()] * score(prefix);
    for token in 0..policy.vocab_size() {
        prefix.push(token);
        if viable(prefix, digits) {
            total += probs[token] * walk(policy, context, gold, digits, verifier, prefix)?;
        }
        prefix.pop();
    }
    Ok(total)
}

/// Mean over tasks of the exact success probability.
pub fn evaluate(policy: &ToyPolicy, curriculum: &Curriculum, verifier: &Verifier) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for task in &curriculum.tasks {
        let context = curriculum
            .context(&task.id)
            .ok_or_else(|| TrainError::UnknownTask(task.id.clone()))?;
        total += success_probability(policy, context, &task.gold_answer, verifier)?;
    }
    Ok(total / curriculum.tasks.len() as f64)
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub rounds: u32,
    pub update_rule: UpdateRuleKind,
    pub weight_decay: f64,
    /// 0 means one batch holding every record.
    pub minibatch_size: u32,
    pub theta_cap: f64,
    pub window: u32,
}

impl From<&PipelineConfig> for TrainSettings {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            rounds: c.rounds,
            update_rule: c.update_rule,
            weight_decay: c.weight_decay,
            minibatch_size: c.minibatch_size,
            theta_cap: c.theta_cap,
            window: c.window,
        }
    }
}

/// Summary of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    /// 0 is the untrained baseline.
    pub round: u32,
    pub learning_rate: f64,
    pub trajectories: usize,
    pub selected: usize,
    pub eval_reward: f64,
    pub running_mean_reward: f64,
    pub mean_abs_param: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub policy: ToyPolicy,
    pub round: u32,
    pub learning_rate: f64,
    pub running_mean_reward: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<RoundLog>,
}

/// Runs `settings.rounds` rounds of collect, score, select and update.
///
/// Every round collects a fresh pool with a seed derived from the round
/// number, so the run is reproducible from `config.seed`. Rounds with no
/// selected records leave the policy unchanged.
pub fn train(
    config: &PipelineConfig,
    curriculum: &Curriculum,
    vision: &dyn Backend,
    reasoner: &dyn Backend,
) -> Result<TrainOutcome, TrainError> {
    let settings = TrainSettings::from(config);
    let verifier = Verifier::with_tolerance(config.verifier_rel_tol);
    let gold = BTreeMap::new();
    let mut rule = match settings.update_rule {
        UpdateRuleKind::Sgd => UpdateRule::Sgd,
        UpdateRuleKind::Adamw => UpdateRule::adamw(settings.weight_decay),
    };

    let mut state = TrainState {
        policy: curriculum.initial_policy(settings.window as usize),
        round: 0,
        learning_rate: settings.learning_rate,
        running_mean_reward: 0.0,
    };
    let baseline = evaluate(&state.policy, curriculum, &verifier)?;
    let mut history = vec![RoundLog {
        round: 0,
        learning_rate: 0.0,
        trajectories: 0,
        selected: 0,
        eval_reward: baseline,
        running_mean_reward: baseline,
        mean_abs_param: 0.0,
    }];
    state.running_mean_reward = baseline;

    for round in 1..=settings.rounds {
        let lr = cosine_lr(settings.learning_rate, round - 1, settings.rounds);
        let round_config = PipelineConfig {
            seed: rng::derive_seed(config.seed, &["round", &round.to_string()]),
            ..config.clone()
        };
        let pool = collect(curriculum.tasks(), &round_config, vision, reasoner)?;
        let scored = score_pool(&pool, &gold, &verifier)?;
        let (records, _) = select(&scored, config.alpha, config.keep_n)?;
        let toy = curriculum.toy_records(&records)?;

        let batch = match settings.minibatch_size {
            0 => toy.len().max(1),
            b => b as usize,
        };
        for chunk in toy.chunks(batch) {
            let grad = policy_gradient(chunk, &state.policy)?;
            state.policy = rule.step(&state.policy, &grad, lr)?;
        }
        let mean_abs = state.policy.mean_abs_param();
        if !(mean_abs <= settings.theta_cap) {
            return Err(TrainError::Diverged {
                round,
                mean_abs,
                cap: settings.theta_cap,
            });
        }

        let reward = evaluate(&state.policy, curriculum, &verifier)?;
        state.round = round;
        state.learning_rate = lr;
        state.running_mean_reward += (reward - state.running_mean_reward) / f64::from(round + 1);
        log::info!("round {round}: lr {lr:.5}, {} records, eval reward {reward:.4}", toy.len());
        history.push(RoundLog {
            round,
            learning_rate: lr,
            trajectories: scored.trajectory_count(),
            selected: toy.len(),
            eval_reward: reward,
            running_mean_reward: state.running_mean_reward,
            mean_abs_param: mean_abs,
        });
    }
    Ok(TrainOutcome { state, history })
}
