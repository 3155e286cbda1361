//! Generator and reward-scorer interfaces.
//!
//! Search code talks only to [`Generator`] and [`RewardModel`]. Two
//! implementations of each exist: an HTTP client for real endpoints and a
//! simulated world ([`sim::SimWorld`]) whose outputs are pure functions of
//! the request, used as a correctness oracle.

pub mod http;
pub mod sim;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stages::{StageKind, StagedResponse};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub stop: String,
}

/// One call's worth of generation: stages `target_stage..=through_stage`
/// continuing from `prior_stages`.
///
/// Stage-wise search sets `through_stage == target_stage`; best-of-N asks for
/// the whole response in one call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRequest {
    pub question: String,
    pub image_ref: Option<String>,
    pub prior_stages: StagedResponse,
    pub target_stage: StageKind,
    pub through_stage: StageKind,
    pub sampling: Sampling,
    pub seed: Option<u64>,
}

impl GeneratorRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prior_stages.next_kind() != Some(self.target_stage) {
            return Err(BackendError::InvalidRequest(format!(
                "prior stages end at {:?}, target is {}",
                self.prior_stages.last_kind(),
                self.target_stage
            )));
        }
        if self.through_stage < self.target_stage {
            return Err(BackendError::InvalidRequest(
                "through_stage precedes target_stage".into(),
            ));
        }
        if !(self.sampling.temperature >= 0.0 && self.sampling.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.sampling.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRequest {
    pub question: String,
    pub image_ref: Option<String>,
    /// Prefix through the stage being scored.
    pub trajectory: StagedResponse,
}

impl RewardRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.trajectory.is_empty() {
            return Err(BackendError::InvalidRequest("empty trajectory".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RewardScore(f64);

impl RewardScore {
    pub fn new(value: f64) -> Result<Self, BackendError> {
        if value.is_finite() {
            Ok(RewardScore(value))
        } else {
            Err(BackendError::MalformedReply(format!("non-finite score {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub trait Generator: Send + Sync {
    /// Raw text for one candidate, with the final stop marker stripped.
    fn generate(&self, req: &GeneratorRequest) -> Result<String, BackendError>;
}

pub trait RewardModel: Send + Sync {
    fn score(&self, req: &RewardRequest) -> Result<RewardScore, BackendError>;
}

/// Plain instruction-following chat, used by the data pipeline and its judge.
pub trait ChatModel: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String, BackendError>;
}

impl<T: Generator + ?Sized> Generator for &T {
    fn generate(&self, req: &GeneratorRequest) -> Result<String, BackendError> {
        (**self).generate(req)
    }
}

impl<T: RewardModel + ?Sized> RewardModel for &T {
    fn score(&self, req: &RewardRequest) -> Result<RewardScore, BackendError> {
        (**self).score(req)
    }
}

impl<T: ChatModel + ?Sized> ChatModel for &T {
    fn complete(&self, system: &str, user: &str) -> Result<String, BackendError> {
        (**self).complete(system, user)
    }
}

impl<T: Generator + ?Sized> Generator for Box<T> {
    fn generate(&self, req: &GeneratorRequest) -> Result<String, BackendError> {
        (**self).generate(req)
    }
}

impl<T: RewardModel + ?Sized> RewardModel for Box<T> {
    fn score(&self, req: &RewardRequest) -> Result<RewardScore, BackendError> {
        (**self).score(req)
    }
}

impl<T: ChatModel + ?Sized> ChatModel for Box<T> {
    fn complete(&self, system: &str, user: &str) -> Result<String, BackendError> {
        (**self).complete(system, user)
    }
}

/// Wraps a backend and counts every invocation, successful or not.
#[derive(Debug, Default)]
pub struct Counting<T> {
    inner: T,
    calls: AtomicU64,
}

impl<T> Counting<T> {
    pub fn new(inner: T) -> Self {
        Counting {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

impl<T: Generator> Generator for Counting<T> {
    fn generate(&self, req: &GeneratorRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(req)
    }
}

impl<T: RewardModel> RewardModel for Counting<T> {
    fn score(&self, req: &RewardRequest) -> Result<RewardScore, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score(req)
    }
}

impl<T: ChatModel> ChatModel for Counting<T> {
    fn complete(&self, system: &str, user: &str) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(system, user)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stages::StageBlock;

    fn req() -> GeneratorRequest {
        GeneratorRequest {
            question: "q".into(),
            image_ref: None,
            prior_stages: StagedResponse::new(),
            target_stage: StageKind::Summary,
            through_stage: StageKind::Summary,
            sampling: Sampling {
                temperature: 1.0,
                max_new_tokens: 16,
                stop: "</SUMMARY>".into(),
            },
            seed: None,
        }
    }

    #[test]
    fn request_validation() {
        req().validate().unwrap();
        let mut r = req();
        r.target_stage = StageKind::Caption;
        r.through_stage = StageKind::Caption;
        assert!(r.validate().is_err());
        r.prior_stages
            .push(StageBlock::new(StageKind::Summary, "s"))
            .unwrap();
        r.validate().unwrap();
        r.through_stage = StageKind::Summary;
        assert!(r.validate().is_err());
        let mut r = req();
        r.sampling.temperature = -0.1;
        assert!(r.validate().is_err());
        let mut r = req();
        r.sampling.max_new_tokens = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn reward_score_must_be_finite() {
        assert!(RewardScore::new(f64::NAN).is_err());
        assert!(RewardScore::new(f64::INFINITY).is_err());
        assert_eq!(RewardScore::new(-0.5).unwrap().value(), -0.5);
        let r = RewardRequest {
            question: "q".into(),
            image_ref: None,
            trajectory: StagedResponse::new(),
        };
        assert!(r.validate().is_err());
    }
}
