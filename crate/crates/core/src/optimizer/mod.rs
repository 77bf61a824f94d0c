//! Off-policy objective, its gradient and the importance-ratio bias bound.
//!
//! The selected dataset is generated by a behavior policy `mu` but the
//! update treats it as if it came from the trained policy `pi`, dropping
//! the ratio `pi/mu`. [`check_bias_bound`] measures exactly how much that
//! changes the objective on an enumerable policy pair.

mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{PolicyError, ToyPolicy};

pub use train::{
    decode_sequence, encode_trajectory, evaluate, success_probability, train, Curriculum, RoundLog, TrainError,
    TrainOutcome, TrainSettings, TrainState, CURRICULUM_MAX_LEN, CURRICULUM_VOCAB, RECHECK, TENS_BASE, TENS_TOKENS,
};

/// Slack allowed when comparing the observed bias to the bound.
pub const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum OptimizerError {
    #[error("record set is empty")]
    Empty,
    #[error("behavior policy gives record {index} zero probability")]
    ZeroBehaviorProbability { index: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("could not reach a ratio deviation of {target}: {reason}")]
    Calibration { target: f64, reason: String },
}

/// One element of a toy off-policy dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRecord {
    pub context: Vec<f64>,
    pub sequence: Vec<usize>,
    pub reward: f64,
}

/// Importance-weighted objective: mean of `pi(y)/mu(y) * R`.
pub fn estimate_objective_is(records: &[ToyRecord], pi: &ToyPolicy, mu: &ToyPolicy) -> Result<f64, OptimizerError> {
    if records.is_empty() {
        return Err(OptimizerError::Empty);
    }
    let mut total = 0.0;
    for (index, r) in records.iter().enumerate() {
        let log_mu = mu.log_prob(&r.context, &r.sequence)?;
        if log_mu.exp() == 0.0 {
            return Err(OptimizerError::ZeroBehaviorProbability { index });
        }
        let ratio = (pi.log_prob(&r.context, &r.sequence)? - log_mu).exp();
        total += ratio * r.reward;
    }
    Ok(total / records.len() as f64)
}

/// The same objective with every ratio set to one.
pub fn estimate_objective_plain(records: &[ToyRecord]) -> Result<f64, OptimizerError> {
    if records.is_empty() {
        return Err(OptimizerError::Empty);
    }
    Ok(records.iter().map(|r| r.reward).sum::<f64>() / records.len() as f64)
}

/// Mean of `R * grad log pi(y)` over the records.
///
/// Per-record terms are computed in parallel and summed in record order, so
/// the result does not depend on scheduling.
pub fn policy_gradient(records: &[ToyRecord], pi: &ToyPolicy) -> Result<Vec<f64>, OptimizerError> {
    if records.is_empty() {
        return Err(OptimizerError::Empty);
    }
    let terms = records
        .par_iter()
        .map(|r| {
            let mut g = pi.grad_log_prob(&r.context, &r.sequence)?;
            g.iter_mut().for_each(|x| *x *= r.reward);
            Ok(g)
        })
        .collect::<Result<Vec<_>, PolicyError>>()?;
    let mut grad = vec![0.0; pi.param_len()];
    for term in &terms {
        for (g, t) in grad.iter_mut().zip(term) {
            *g += t;
        }
    }
    let n = records.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

/// Exact comparison of the importance-weighted and ratio-free objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub g_is: f64,
    pub g_1: f64,
    /// Largest `|pi/mu - 1|` over rewarded sequences with `mu > 0`.
    pub delta: f64,
    pub bound_satisfied: bool,
}

impl BiasReport {
    pub fn gap(&self) -> f64 {
        (self.g_is - self.g_1).abs()
    }
}

/// Enumerates every sequence under `mu` and computes both objectives
/// exactly. Sequences with zero reward are outside the support that
/// matters and do not enter `delta`.
pub fn check_bias_bound(
    pi: &ToyPolicy,
    mu: &ToyPolicy,
    reward: &dyn Fn(&[usize]) -> f64,
    context: &[f64],
) -> Result<BiasReport, OptimizerError> {
    let mut g_is = 0.0;
    let mut g_1 = 0.0;
    let mut delta: f64 = 0.0;
    for (seq, mu_p) in mu.enumerate(context)? {
        let r = reward(&seq);
        if r == 0.0 || mu_p == 0.0 {
            continue;
        }
        let ratio = (pi.log_prob(context, &seq)? - mu.log_prob(context, &seq)?).exp();
        g_is += mu_p * ratio * r;
        g_1 += mu_p * r;
        delta = delta.max((ratio - 1.0).abs());
    }
    Ok(BiasReport {
        g_is,
        g_1,
        delta,
        bound_satisfied: (g_is - g_1).abs() <= delta + BOUND_SLACK,
    })
}

/// Largest ratio deviation of `pi` against `mu` over rewarded sequences.
pub fn ratio_deviation(
    pi: &ToyPolicy,
    mu: &ToyPolicy,
    reward: &dyn Fn(&[usize]) -> f64,
    context: &[f64],
) -> Result<f64, OptimizerError> {
    Ok(check_bias_bound(pi, mu, reward, context)?.delta)
}

/// Finds `pi = mu + s * direction` whose ratio deviation over rewarded
/// sequences equals `target` (to within bisection precision).
pub fn calibrate_perturbation(
    mu: &ToyPolicy,
    direction: &[f64],
    reward: &dyn Fn(&[usize]) -> f64,
    context: &[f64],
    target: f64,
) -> Result<ToyPolicy, OptimizerError> {
    let fail = |reason: &str| OptimizerError::Calibration {
        target,
        reason: reason.to_string(),
    };
    if !(target > 0.0 && target.is_finite()) {
        return Err(fail("target must be positive"));
    }
    let deviation = |s: f64| -> Result<f64, OptimizerError> {
        ratio_deviation(&mu.stepped(direction, s)?, mu, reward, context)
    };
    let mut hi = 1e-3;
    while deviation(hi)? < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(fail("direction does not move rewarded sequences"));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if deviation(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(mu.stepped(direction, hi)?)
}

/// A deterministic reward marking roughly half of all sequences correct,
/// chosen by hashing each sequence together with `seed`.
pub fn hashed_reward(seed: u64) -> impl Fn(&[usize]) -> f64 {
    move |seq: &[usize]| {
        let key = format!("{seq:?}");
        (crate::rng::derive_seed(seed, &["reward", &key]) & 1) as f64
    }
}

/// A random behavior policy and a perturbation of it whose ratio deviation
/// over the rewarded sequences of `reward` is `delta`.
pub fn engineered_pair(
    vocab_size: usize,
    max_len: usize,
    window: usize,
    delta: f64,
    seed: u64,
    reward: &dyn Fn(&[usize]) -> f64,
) -> Result<(ToyPolicy, ToyPolicy), OptimizerError> {
    use rand::Rng;
    let shape = ToyPolicy::new(vocab_size, max_len, 0, window)?;
    let draw = |part: &str| -> Vec<f64> {
        let mut rng = crate::rng::stream(seed, &["engineered", part]);
        (0..shape.param_len()).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let mu = shape.clone().with_params(draw("mu"))?;
    let direction = draw("direction");
    let pi = calibrate_perturbation(&mu, &direction, reward, &[], delta)?;
    Ok((mu, pi))
}

/// `E_pi[R]`, by enumeration.
pub fn exact_objective(pi: &ToyPolicy, reward: &dyn Fn(&[usize]) -> f64, context: &[f64]) -> Result<f64, OptimizerError> {
    Ok(pi.enumerate(context)?.iter().map(|(seq, p)| p * reward(seq)).sum())
}

/// `E_mu[w(y) * R(y) * grad log pi(y)]` by enumeration, with `w = pi/mu`
/// when `importance` is set and `w = 1` otherwise.
pub fn exact_gradient(
    pi: &ToyPolicy,
    mu: &ToyPolicy,
    reward: &dyn Fn(&[usize]) -> f64,
    context: &[f64],
    importance: bool,
) -> Result<Vec<f64>, OptimizerError> {
    let mut grad = vec![0.0; pi.param_len()];
    for (seq, mu_p) in mu.enumerate(context)? {
        let r = reward(&seq);
        if r == 0.0 {
            continue;
        }
        let weight = if importance {
            (pi.log_prob(context, &seq)? - mu.log_prob(context, &seq)?).exp()
        } else {
            1.0
        };
        let score = pi.grad_log_prob(context, &seq)?;
        for (g, s) in grad.iter_mut().zip(score) {
            *g += mu_p * weight * r * s;
        }
    }
    Ok(grad)
}

/// Cosine decay from `initial` at step 0 to `initial / 4` at the last of
/// `horizon` steps.
pub fn cosine_lr(initial: f64, step: u32, horizon: u32) -> f64 {
    let floor = initial / 4.0;
    let progress = if horizon <= 1 {
        1.0
    } else {
        f64::from(step.min(horizon - 1)) / f64::from(horizon - 1)
    };
    floor + (initial - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// How a gradient turns into a parameter change. Both rules ascend the
/// objective; neither adds a penalty toward a reference policy.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateRule {
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
}

impl UpdateRule {
    pub fn adamw(weight_decay: f64) -> Self {
        UpdateRule::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Applies one ascent step and returns the updated policy.
    pub fn step(&mut self, policy: &ToyPolicy, grad: &[f64], lr: f64) -> Result<ToyPolicy, OptimizerError> {
        match self {
            UpdateRule::Sgd => Ok(policy.stepped(grad, lr)?),
            UpdateRule::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
                m,
                v,
                t,
            } => {
                if m.len() != grad.len() {
                    *m = vec![0.0; grad.len()];
                    *v = vec![0.0; grad.len()];
                }
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                let direction: Vec<f64> = grad
                    .iter()
                    .zip(policy.params())
                    .enumerate()
                    .map(|(i, (g, p))| {
                        m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                        v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                        (m[i] / c1) / ((v[i] / c2).sqrt() + *eps) - *weight_decay * p
                    })
                    .collect();
                Ok(policy.stepped(&direction, lr)?)
            }
        }
    }
}
