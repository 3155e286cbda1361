use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SearchError;
use crate::backends::RewardScore;
use crate::stages::{StageKind, StagedResponse};

/// When a candidate was generated. Unique within one search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Birth {
    pub pass: usize,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub trajectory: StagedResponse,
    pub stage_scores: BTreeMap<StageKind, RewardScore>,
    pub parent: Option<u64>,
    pub birth: Birth,
    /// Set when the generator output could not be parsed; such candidates
    /// rank as −∞ and are never expanded.
    pub parse_error: Option<String>,
}

impl Candidate {
    pub fn id(&self) -> u64 {
        self.birth.index
    }

    pub fn is_parsed(&self) -> bool {
        self.parse_error.is_none()
    }

    /// Score at `stage`, or −∞ when unscored.
    pub fn score_at(&self, stage: StageKind) -> f64 {
        self.stage_scores
            .get(&stage)
            .map_or(f64::NEG_INFINITY, |s| s.value())
    }
}

/// Descending score at `stage`, then earlier birth.
pub fn rank_order(a: &Candidate, b: &Candidate, stage: StageKind) -> Ordering {
    b.score_at(stage)
        .total_cmp(&a.score_at(stage))
        .then_with(|| a.birth.cmp(&b.birth))
}

/// The `n` best candidates at `stage`, best first.
pub fn select_top(
    cands: &[Candidate],
    n: usize,
    stage: StageKind,
) -> Result<Vec<Candidate>, SearchError> {
    if n == 0 || n > cands.len() {
        return Err(SearchError::InsufficientCandidates {
            wanted: n,
            available: cands.len(),
        });
    }
    let mut order: Vec<&Candidate> = cands.iter().collect();
    // Partial selection would do, but M is small.
    order.sort_by(|a, b| rank_order(a, b, stage));
    Ok(order.into_iter().take(n).cloned().collect())
}

#[cfg(test)]
pub(crate) fn scored(index: u64, pass: usize, stage: StageKind, score: Option<f64>) -> Candidate {
    let mut stage_scores = BTreeMap::new();
    if let Some(s) = score {
        stage_scores.insert(stage, RewardScore::new(s).unwrap());
    }
    Candidate {
        trajectory: StagedResponse::new(),
        stage_scores,
        parent: None,
        birth: Birth { pass, index },
        parse_error: None,
    }
}
