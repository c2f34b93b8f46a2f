//! Evaluation backends.
//!
//! A backend turns one (genotype, building) pair into a parsed
//! [`DataEstimate`]. Two implementations ship here: [`llm::LlmEvaluator`],
//! which prompts a vision model through a swappable [`llm::Transport`], and
//! [`oracle::OracleEvaluator`], a deterministic planted landscape used for
//! experiments and tests. [`schema_gen`] builds cue schemas with the LLM.

pub mod llm;
pub mod oracle;
pub mod prompts;
pub mod schema_gen;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::BuildingRecord;
use crate::fitness::DataEstimate;
use crate::parsing::ParseError;
use crate::schema::{DataItem, Genotype};

/// Which evaluation backend a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Llm,
    Oracle,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm" => Ok(BackendKind::Llm),
            "oracle" => Ok(BackendKind::Oracle),
            other => Err(format!("unknown backend `{other}` (expected llm or oracle)")),
        }
    }
}

/// One estimation call.
#[derive(Debug, Clone, Copy)]
pub struct EvaluationRequest<'a> {
    pub genotype: &'a Genotype,
    /// Canonical key of `genotype`.
    pub key: &'a str,
    pub building: &'a BuildingRecord,
    pub data_item: DataItem,
    /// Zero-based retry attempt.
    pub attempt: u32,
    /// How many times this key had been evaluated before this call.
    pub eval_counter: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    /// The answer came back but could not be parsed. Retryable; once retries
    /// run out the building is scored with the failure penalty.
    #[error("unparseable answer: {0}")]
    Parse(#[from] ParseError),
    /// The request did not complete. Retryable; once retries run out the run
    /// aborts so it can be resumed later.
    #[error("transport failure: {0}")]
    Transport(String),
    /// Not retryable (bad credentials, misconfiguration).
    #[error("fatal backend error: {0}")]
    Fatal(String),
}

/// The backend contract. Implementations must tolerate concurrent calls.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, request: &EvaluationRequest<'_>) -> Result<DataEstimate, EvalError>;
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn evaluate(&self, request: &EvaluationRequest<'_>) -> Result<DataEstimate, EvalError> {
        (**self).evaluate(request)
    }
}

impl<E: Evaluator + ?Sized> Evaluator for std::sync::Arc<E> {
    fn evaluate(&self, request: &EvaluationRequest<'_>) -> Result<DataEstimate, EvalError> {
        (**self).evaluate(request)
    }
}

/// Result of an evaluation after the retry policy has run.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Estimate { estimate: DataEstimate, attempts: u32 },
    /// Parse failures on every attempt.
    Failed { reason: String, attempts: u32 },
}

/// Errors that stop a run (or an analysis) outright.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AbortError {
    #[error("building {building}: {message} (after {attempts} attempts)")]
    Exhausted {
        building: String,
        message: String,
        attempts: u32,
    },
    #[error("building {building}: {message}")]
    Fatal { building: String, message: String },
}

/// Calls `evaluator` up to `retry_limit + 1` times, resending on parse and
/// transport failures.
pub fn evaluate_with_retry(
    evaluator: &dyn Evaluator,
    base: EvaluationRequest<'_>,
    retry_limit: u32,
) -> Result<Outcome, AbortError> {
    let mut last_parse = None;
    let mut last_transport = None;
    for attempt in 0..=retry_limit {
        let request = EvaluationRequest { attempt, ..base };
        match evaluator.evaluate(&request) {
            Ok(estimate) if estimate.matches(base.data_item) => {
                return Ok(Outcome::Estimate {
                    estimate,
                    attempts: attempt + 1,
                })
            }
            Ok(other) => {
                return Err(AbortError::Fatal {
                    building: base.building.id.clone(),
                    message: format!(
                        "backend returned a {} estimate for {}",
                        other.variant_name(),
                        base.data_item
                    ),
                })
            }
            Err(EvalError::Parse(e)) => {
                log::debug!("building {}: attempt {attempt}: {e}", base.building.id);
                last_parse = Some(e.to_string());
                last_transport = None;
            }
            Err(EvalError::Transport(e)) => {
                log::warn!("building {}: attempt {attempt}: {e}", base.building.id);
                last_transport = Some(e);
            }
            Err(EvalError::Fatal(message)) => {
                return Err(AbortError::Fatal {
                    building: base.building.id.clone(),
                    message,
                })
            }
        }
    }
    let attempts = retry_limit + 1;
    match (last_transport, last_parse) {
        (Some(message), _) => Err(AbortError::Exhausted {
            building: base.building.id.clone(),
            message,
            attempts,
        }),
        (None, reason) => Ok(Outcome::Failed {
            reason: reason.unwrap_or_default(),
            attempts,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GroundTruth;
    use crate::fitness::WindowClass;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Scripted {
        calls: AtomicU32,
        script: Vec<Result<DataEstimate, EvalError>>,
    }

    impl Evaluator for Scripted {
        fn evaluate(&self, request: &EvaluationRequest<'_>) -> Result<DataEstimate, EvalError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst) as usize;
            assert_eq!(request.attempt as usize, n);
            self.script[n.min(self.script.len() - 1)].clone()
        }
    }

    fn building() -> BuildingRecord {
        BuildingRecord {
            id: "b".into(),
            region: "UK".into(),
            image_sets: Default::default(),
            truth: GroundTruth::default(),
            split: None,
        }
    }

    fn run(script: Vec<Result<DataEstimate, EvalError>>, retry: u32) -> (Result<Outcome, AbortError>, u32) {
        let ev = Scripted { calls: AtomicU32::new(0), script };
        let g = Genotype::empty(1);
        let b = building();
        let req = EvaluationRequest {
            genotype: &g,
            key: "k",
            building: &b,
            data_item: DataItem::Windows,
            attempt: 0,
            eval_counter: 0,
        };
        let out = evaluate_with_retry(&ev, req, retry);
        (out, ev.calls.load(Ordering::SeqCst))
    }

    #[test]
    fn parse_failure_consumes_one_retry() {
        let ok = DataEstimate::Windows(WindowClass::Double);
        let (out, calls) = run(vec![Err(ParseError::MissingDelimiter.into()), Ok(ok)], 3);
        assert_eq!(out.unwrap(), Outcome::Estimate { estimate: ok, attempts: 2 });
        assert_eq!(calls, 2);
    }

    #[test]
    fn exhausted_parse_failures_become_penalties() {
        let (out, calls) = run(vec![Err(ParseError::MissingDelimiter.into())], 2);
        assert!(matches!(out.unwrap(), Outcome::Failed { attempts: 3, .. }));
        assert_eq!(calls, 3);
    }

    #[test]
    fn exhausted_transport_failures_abort() {
        let (out, _) = run(vec![Err(EvalError::Transport("503".into()))], 1);
        assert!(matches!(out, Err(AbortError::Exhausted { attempts: 2, .. })));
    }

    #[test]
    fn fatal_errors_abort_immediately() {
        let (out, calls) = run(vec![Err(EvalError::Fatal("401".into()))], 5);
        assert!(matches!(out, Err(AbortError::Fatal { .. })));
        assert_eq!(calls, 1);
    }

    #[test]
    fn wrong_variant_is_fatal() {
        let (out, _) = run(vec![Ok(DataEstimate::Uvalue(1.0))], 1);
        assert!(matches!(out, Err(AbortError::Fatal { .. })));
    }
}
