//! Rule-based answer verification.
//!
//! [`Verifier::extract_answer`] pulls the final answer out of a reasoning
//! trace, [`parse_answer`] turns it into an exact canonical form and
//! [`Verifier::check_equivalence`] compares two answers. Together they give
//! the binary outcome reward of a trajectory.

mod expr;
mod extract;

use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;

pub use expr::{parse_answer, terminates, AnswerExpr};

/// Default cues for answers that are not boxed.
pub const DEFAULT_CUES: [&str; 2] = ["final answer is", "answer:"];

#[derive(Debug, Clone)]
pub struct Verifier {
    cues: Vec<String>,
    rel_tol: BigRational,
}

impl Default for Verifier {
    fn default() -> Self {
        Self {
            cues: DEFAULT_CUES.iter().map(|c| c.to_string()).collect(),
            rel_tol: BigRational::new(BigInt::from(1), BigInt::from(10_000)),
        }
    }
}

impl Verifier {
    /// A verifier using `rel_tol` for comparisons between a decimal and a
    /// fraction whose expansion does not terminate.
    ///
    /// The tolerance is taken at its shortest decimal representation, so
    /// `1e-4` means exactly 1/10000.
    pub fn with_tolerance(rel_tol: f64) -> Self {
        let rel_tol = match parse_answer(&format!("{rel_tol}")).value() {
            Some(v) => v,
            None => BigRational::new(BigInt::from(1), BigInt::from(10_000)),
        };
        Self {
            rel_tol,
            ..Self::default()
        }
    }

    pub fn with_cues<I, S>(mut self, cues: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.cues = cues.into_iter().map(Into::into).collect();
        self
    }

    pub fn rel_tol(&self) -> &BigRational {
        &self.rel_tol
    }

    /// The final answer in `text`, if any.
    ///
    /// The last balanced `\boxed{...}` wins; failing that, the rest of the
    /// line after the last answer cue. Text outside `<think>` spans is
    /// searched before text inside them.
    pub fn extract_answer(&self, text: &str) -> Option<String> {
        let (outside, inside) = extract::split_think(text);
        extract::extract_from(&outside, &self.cues).or_else(|| extract::extract_from(&inside, &self.cues))
    }

    pub fn check_equivalence(&self, pred: &str, gold: &str) -> bool {
        expr::equivalent(&parse_answer(pred), &parse_answer(gold), &self.rel_tol)
    }

    /// 1 iff an answer can be extracted and it is equivalent to `gold`.
    pub fn score_trajectory(&self, text: &str, gold: &str) -> u8 {
        match self.extract_answer(text) {
            Some(answer) if self.check_equivalence(&answer, gold) => 1,
            _ => 0,
        }
    }
}

pub fn extract_answer(text: &str) -> Option<String> {
    Verifier::default().extract_answer(text)
}

pub fn check_equivalence(pred: &str, gold: &str) -> bool {
    Verifier::default().check_equivalence(pred, gold)
}

pub fn score_trajectory(text: &str, gold: &str) -> u8 {
    Verifier::default().score_trajectory(text, gold)
}

/// One row of an equivalence corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusCase {
    pub line: usize,
    pub pred: String,
    pub gold: String,
    pub expected: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusReport {
    pub total: usize,
    pub passed: usize,
    pub failures: Vec<CorpusCase>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Parses a tab-separated corpus: `pred<TAB>gold[<TAB>expected]`.
///
/// `expected` is `1` (equivalent, the default) or `0`. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<CorpusCase>, CorpusError> {
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let expected = match cols.get(2).map(|s| s.trim()) {
            None | Some("1") => true,
            Some("0") => false,
            Some(other) => {
                return Err(CorpusError::Format {
                    line: line_no,
                    message: format!("expected column must be 0 or 1, got `{other}`"),
                })
            }
        };
        if cols.len() < 2 || cols.len() > 3 {
            return Err(CorpusError::Format {
                line: line_no,
                message: format!("expected 2 or 3 tab-separated columns, got {}", cols.len()),
            });
        }
        cases.push(CorpusCase {
            line: line_no,
            pred: cols[0].to_string(),
            gold: cols[1].to_string(),
            expected,
        });
    }
    Ok(cases)
}

pub fn run_corpus(verifier: &Verifier, cases: &[CorpusCase]) -> CorpusReport {
    let mut report = CorpusReport {
        total: cases.len(),
        ..Default::default()
    };
    for case in cases {
        if verifier.check_equivalence(&case.pred, &case.gold) == case.expected {
            report.passed += 1;
        } else {
            report.failures.push(case.clone());
        }
    }
    report
}

pub fn run_corpus_file(verifier: &Verifier, path: impl AsRef<Path>) -> Result<CorpusReport, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(run_corpus(verifier, &parse_corpus(&text)?))
}
