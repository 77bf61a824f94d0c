//! A small autoregressive softmax policy over a finite vocabulary.
//!
//! Tokens are `0..vocab_size`; index `vocab_size` is STOP. At each step the
//! logits are a linear function of a feature vector made of a bias, the
//! real-valued context and a one-hot encoding of the last `window` tokens
//! (a dedicated pad symbol fills positions before the start). A sequence
//! ends at STOP or after `max_len` tokens, whichever comes first, so
//! sequences of length `max_len` carry no STOP factor.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Largest number of sequences [`ToyPolicy::enumerate`] will visit.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    OutOfVocabulary { token: usize, vocab_size: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("context has {got} features, expected {expected}")]
    ContextDim { expected: usize, got: usize },
    #[error("enumeration would visit {count} sequences (limit {limit})")]
    EnumerationGuard { count: u64, limit: u64 },
    #[error("parameter vector has {got} entries, expected {expected}")]
    ParamLen { expected: usize, got: usize },
    #[error("invalid policy shape: {0}")]
    Shape(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed policy file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    vocab_size: usize,
    max_len: usize,
    context_dim: usize,
    window: usize,
    /// Row-major `(vocab_size + 1) x feature_dim`.
    params: Vec<f64>,
}

impl ToyPolicy {
    /// A policy with all parameters zero, i.e. uniform step distributions.
    pub fn new(
        vocab_size: usize,
        max_len: usize,
        context_dim: usize,
        window: usize,
    ) -> Result<Self, PolicyError> {
        if vocab_size == 0 {
            return Err(PolicyError::Shape("vocab_size must be at least 1".into()));
        }
        let mut policy = Self {
            vocab_size,
            max_len,
            context_dim,
            window,
            params: Vec::new(),
        };
        policy.params = vec![0.0; policy.param_len()];
        Ok(policy)
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Result<Self, PolicyError> {
        if params.len() != self.param_len() {
            return Err(PolicyError::ParamLen {
                expected: self.param_len(),
                got: params.len(),
            });
        }
        self.params = params;
        Ok(self)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn stop(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Number of softmax outputs (vocabulary plus STOP).
    pub fn num_outputs(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn feature_dim(&self) -> usize {
        1 + self.context_dim + self.window * (self.vocab_size + 1)
    }

    pub fn param_len(&self) -> usize {
        self.num_outputs() * self.feature_dim()
    }

    /// Mean absolute parameter value.
    pub fn mean_abs_param(&self) -> f64 {
        if self.params.is_empty() {
            return 0.0;
        }
        self.params.iter().map(|p| p.abs()).sum::<f64>() / self.params.len() as f64
    }

    /// A copy with `params + scale * direction`.
    pub fn stepped(&self, direction: &[f64], scale: f64) -> Result<Self, PolicyError> {
        if direction.len() != self.params.len() {
            return Err(PolicyError::ParamLen {
                expected: self.params.len(),
                got: direction.len(),
            });
        }
        let params = self
            .params
            .iter()
            .zip(direction)
            .map(|(p, d)| p + scale * d)
            .collect();
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    fn check_context(&self, context: &[f64]) -> Result<(), PolicyError> {
        if context.len() != self.context_dim {
            return Err(PolicyError::ContextDim {
                expected: self.context_dim,
                got: context.len(),
            });
        }
        Ok(())
    }

    fn check_sequence(&self, sequence: &[usize]) -> Result<(), PolicyError> {
        if sequence.len() > self.max_len {
            return Err(PolicyError::TooLong {
                len: sequence.len(),
                max_len: self.max_len,
            });
        }
        if let Some(&token) = sequence.iter().find(|&&t| t >= self.vocab_size) {
            return Err(PolicyError::OutOfVocabulary {
                token,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Feature vector for the step after `prefix`.
    pub fn features(&self, context: &[f64], prefix: &[usize]) -> Vec<f64> {
        let mut phi = vec![0.0; self.feature_dim()];
        phi[0] = 1.0;
        phi[1..=self.context_dim].copy_from_slice(context);
        let base = 1 + self.context_dim;
        let slots = self.vocab_size + 1;
        for w in 0..self.window {
            // w = 0 is the most recent token
            let symbol = match prefix.len().checked_sub(w + 1) {
                Some(i) => prefix[i],
                None => self.vocab_size,
            };
            phi[base + w * slots + symbol] = 1.0;
        }
        phi
    }

    fn logits(&self, phi: &[f64]) -> Vec<f64> {
        let f = phi.len();
        (0..self.num_outputs())
            .map(|k| {
                let row = &self.params[k * f..(k + 1) * f];
                row.iter().zip(phi).map(|(w, x)| w * x).sum()
            })
            .collect()
    }

    /// Next-token distribution over `0..=vocab_size` (last entry is STOP).
    pub fn step_probs(&self, context: &[f64], prefix: &[usize]) -> Result<Vec<f64>, PolicyError> {
        self.check_context(context)?;
        self.check_sequence(prefix)?;
        Ok(softmax(&self.logits(&self.features(context, prefix))))
    }

    fn step_log_probs(&self, phi: &[f64]) -> Vec<f64> {
        log_softmax(&self.logits(phi))
    }

    /// `log π(sequence | context)`, summed over steps including the final
    /// STOP when the sequence is shorter than `max_len`.
    pub fn log_prob(&self, context: &[f64], sequence: &[usize]) -> Result<f64, PolicyError> {
        self.check_context(context)?;
        self.check_sequence(sequence)?;
        let mut total = 0.0;
        for (l, choice) in self.choices(sequence) {
            let lp = self.step_log_probs(&self.features(context, &sequence[..l]));
            total += lp[choice];
        }
        Ok(total)
    }

    /// Gradient of [`log_prob`](Self::log_prob) with respect to the
    /// parameters, laid out like [`params`](Self::params).
    pub fn grad_log_prob(&self, context: &[f64], sequence: &[usize]) -> Result<Vec<f64>, PolicyError> {
        self.check_context(context)?;
        self.check_sequence(sequence)?;
        let f = self.feature_dim();
        let mut grad = vec![0.0; self.param_len()];
        for (l, choice) in self.choices(sequence) {
            let phi = self.features(context, &sequence[..l]);
            let probs = softmax(&self.logits(&phi));
            for (k, p) in probs.iter().enumerate() {
                let coeff = if k == choice { 1.0 - p } else { -p };
                if coeff == 0.0 {
                    continue;
                }
                let row = &mut grad[k * f..(k + 1) * f];
                for (g, x) in row.iter_mut().zip(&phi) {
                    *g += coeff * x;
                }
            }
        }
        Ok(grad)
    }

    /// The (prefix length, chosen output) pairs that make up a sequence.
    fn choices<'a>(&'a self, sequence: &'a [usize]) -> impl Iterator<Item = (usize, usize)> + 'a {
        let stop = (sequence.len() < self.max_len).then_some((sequence.len(), self.stop()));
        sequence.iter().copied().enumerate().chain(stop)
    }

    /// Ancestral sample.
    pub fn sample<R: Rng + ?Sized>(&self, context: &[f64], rng: &mut R) -> Result<Vec<usize>, PolicyError> {
        self.check_context(context)?;
        let mut sequence = Vec::with_capacity(self.max_len);
        while sequence.len() < self.max_len {
            let probs = softmax(&self.logits(&self.features(context, &sequence)));
            let token = draw(&probs, rng.random::<f64>());
            if token == self.stop() {
                break;
            }
            sequence.push(token);
        }
        Ok(sequence)
    }

    /// Number of sequences of length at most `max_len`.
    pub fn support_size(&self) -> u64 {
        let v = self.vocab_size as u64;
        let mut total: u64 = 0;
        let mut level: u64 = 1;
        for _ in 0..=self.max_len {
            total = total.saturating_add(level);
            level = level.saturating_mul(v);
        }
        total
    }

    /// Every sequence with its probability, shortest first and then in
    /// lexicographic order.
    pub fn enumerate(&self, context: &[f64]) -> Result<Vec<(Vec<usize>, f64)>, PolicyError> {
        self.check_context(context)?;
        let count = self.support_size();
        if count > ENUMERATION_LIMIT {
            return Err(PolicyError::EnumerationGuard {
                count,
                limit: ENUMERATION_LIMIT,
            });
        }
        let mut out = Vec::with_capacity(count as usize);
        self.walk(context, &mut Vec::new(), 0.0, &mut out);
        out.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(out)
    }

    fn walk(&self, context: &[f64], prefix: &mut Vec<usize>, log_p: f64, out: &mut Vec<(Vec<usize>, f64)>) {
        if prefix.len() == self.max_len {
            out.push((prefix.clone(), log_p.exp()));
            return;
        }
        let lp = self.step_log_probs(&self.features(context, prefix));
        out.push((prefix.clone(), (log_p + lp[self.stop()]).exp()));
        for token in 0..self.vocab_size {
            prefix.push(token);
            self.walk(context, prefix, log_p + lp[token], out);
            prefix.pop();
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let policy: Self = serde_json::from_str(text).map_err(|e| PolicyError::Format(e.to_string()))?;
        let expected = Self::new(policy.vocab_size, policy.max_len, policy.context_dim, policy.window)?;
        if policy.params.len() != expected.params.len() {
            return Err(PolicyError::ParamLen {
                expected: expected.params.len(),
                got: policy.params.len(),
            });
        }
        Ok(policy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Inverse-CDF draw from `probs` with a uniform `u` in `[0, 1)`.
pub fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
