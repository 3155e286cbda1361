use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::stages::StageKind;

/// Exact backend call counts for one or more searches.
///
/// Generator calls are attributed to the request's target stage and reward
/// calls to the last stage of the scored trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub generator_calls: u64,
    pub reward_calls: u64,
    pub wall_time_secs: f64,
    pub generator_calls_by_stage: BTreeMap<StageKind, u64>,
    pub reward_calls_by_stage: BTreeMap<StageKind, u64>,
}

impl BudgetLedger {
    pub fn record_generation(&mut self, stage: StageKind) {
        self.generator_calls += 1;
        *self.generator_calls_by_stage.entry(stage).or_default() += 1;
    }

    pub fn record_score(&mut self, stage: StageKind) {
        self.reward_calls += 1;
        *self.reward_calls_by_stage.entry(stage).or_default() += 1;
    }

    pub fn absorb(&mut self, other: &BudgetLedger) {
        self.generator_calls += other.generator_calls;
        self.reward_calls += other.reward_calls;
        self.wall_time_secs += other.wall_time_secs;
        for (k, v) in &other.generator_calls_by_stage {
            *self.generator_calls_by_stage.entry(*k).or_default() += v;
        }
        for (k, v) in &other.reward_calls_by_stage {
            *self.reward_calls_by_stage.entry(*k).or_default() += v;
        }
    }

    /// Equality ignoring wall time.
    pub fn same_counts(&self, other: &BudgetLedger) -> bool {
        self.generator_calls == other.generator_calls
            && self.reward_calls == other.reward_calls
            && self.generator_calls_by_stage == other.generator_calls_by_stage
            && self.reward_calls_by_stage == other.reward_calls_by_stage
    }
}
