//! Reward-guided inference strategies over staged responses.

mod calibrate;
mod config;
mod engine;
mod ledger;
mod select;
pub mod trace;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibrate::{calibrate, rollout, score_reasoning, summarize, CalibrationItem};
pub use config::{
    backtrack_cutoff, CalibrationStats, LoopSemantics, SearchConfig, Strategy, DEFAULT_Z,
};
pub use engine::{best_of_n, generation_seed, replay, run_strategy, stage_wise_beam, swires};
pub use ledger::BudgetLedger;
pub use select::{rank_order, select_top, Birth, Candidate};
pub use trace::{SearchTrace, TraceEvent, TraceHeader};

use crate::backends::BackendError;
use crate::stages::{StageKind, StagedResponse};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("wanted {wanted} candidates, only {available} available")]
    InsufficientCandidates { wanted: usize, available: usize },
    #[error("no parseable candidate at stage {stage}")]
    SearchExhausted { stage: StageKind },
    #[error("calibration corpus is empty")]
    EmptyCorpus,
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub question: String,
    #[serde(default)]
    pub image_ref: Option<String>,
}

impl Query {
    pub fn new(question: impl Into<String>) -> Self {
        Query {
            question: question.into(),
            image_ref: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub response: StagedResponse,
    pub score: f64,
    pub candidate: u64,
}

/// Result of one search. The trace and ledger are kept even on failure.
#[derive(Debug)]
pub struct SearchReport {
    pub outcome: Result<FinalAnswer, SearchError>,
    pub trace: SearchTrace,
    pub ledger: BudgetLedger,
}

impl SearchReport {
    pub fn answer(&self) -> Option<&FinalAnswer> {
        self.outcome.as_ref().ok()
    }
}
