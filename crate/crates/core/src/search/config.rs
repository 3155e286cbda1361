use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SearchError;
use crate::backends::{DEFAULT_MAX_NEW_TOKENS, DEFAULT_TEMPERATURE};
use crate::stages::StageKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    BestOfN,
    StageBeam,
    Swires,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::BestOfN => "best-of-n",
            Strategy::StageBeam => "beam",
            Strategy::Swires => "swires",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = SearchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "best-of-n" | "bon" | "best_of_n" => Ok(Strategy::BestOfN),
            "beam" | "stage-beam" | "stage_beam" => Ok(Strategy::StageBeam),
            "swires" | "retrace" => Ok(Strategy::Swires),
            other => Err(SearchError::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// How the retrace budget `C` bounds the caption/reasoning loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopSemantics {
    /// Repeat-until loop: at most `max(C, 1)` passes in total.
    AlgorithmOne,
    /// One initial pass plus at most `C` retraces.
    MainText,
}

impl LoopSemantics {
    pub fn max_passes(self, retraces: usize) -> usize {
        match self {
            LoopSemantics::AlgorithmOne => retraces.max(1),
            LoopSemantics::MainText => retraces + 1,
        }
    }
}

impl FromStr for LoopSemantics {
    type Err = SearchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "algorithm-one" | "algorithm_one" | "algorithm1" => Ok(LoopSemantics::AlgorithmOne),
            "main-text" | "main_text" | "maintext" => Ok(LoopSemantics::MainText),
            other => Err(SearchError::Config(format!("unknown loop semantics `{other}`"))),
        }
    }
}

/// Mean and sample (n − 1) standard deviation of reasoning-stage rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationStats {
    pub reward_mean: f64,
    pub reward_std: f64,
    pub sample_count: u64,
}

impl CalibrationStats {
    /// Reasoning-stage reward statistics measured over MMStar (1500 items).
    pub const REFERENCE: CalibrationStats = CalibrationStats {
        reward_mean: -0.77,
        reward_std: 2.08,
        sample_count: 1500,
    };

    pub fn validate(&self) -> Result<(), SearchError> {
        if !self.reward_mean.is_finite() {
            return Err(SearchError::Config("reward_mean must be finite".into()));
        }
        if !(self.reward_std >= 0.0 && self.reward_std.is_finite()) {
            return Err(SearchError::Config("reward_std must be finite and >= 0".into()));
        }
        if self.sample_count == 0 {
            return Err(SearchError::Config("sample_count must be positive".into()));
        }
        Ok(())
    }
}

impl Default for CalibrationStats {
    fn default() -> Self {
        Self::REFERENCE
    }
}

/// 60th-percentile z-score: 40% of a normal distribution lies above it.
pub const DEFAULT_Z: f64 = 0.2533;

/// Reward threshold a reasoning must exceed to count as passing.
pub fn backtrack_cutoff(stats: &CalibrationStats, z: f64) -> f64 {
    if z == 0.0 || stats.reward_std == 0.0 {
        return stats.reward_mean;
    }
    stats.reward_mean + z * stats.reward_std
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub strategy: Strategy,
    /// Candidates generated per stage (`M`).
    pub m: usize,
    /// Beam width (`N`); for best-of-N, the number of full responses.
    pub n: usize,
    /// Retrace budget (`C`), interpreted through `loop_semantics`.
    pub retraces: usize,
    /// Threshold z-score (`Z`). May be infinite to force or disable retracing.
    #[serde(with = "super::trace::ext_f64")]
    pub z: f64,
    pub stats: CalibrationStats,
    /// Reasonings in a pass that must exceed the cutoff to stop retracing.
    pub min_pass_count: usize,
    pub retrace_start: StageKind,
    pub summary_candidates: usize,
    pub loop_semantics: LoopSemantics,
    /// Last stage of the pipeline; shorter pipelines are used in tests.
    pub final_stage: StageKind,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub seed: u64,
    /// Maximum concurrent backend calls within one stage.
    pub concurrency: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            strategy: Strategy::Swires,
            m: 4,
            n: 2,
            retraces: 3,
            z: DEFAULT_Z,
            stats: CalibrationStats::REFERENCE,
            min_pass_count: 1,
            retrace_start: StageKind::Caption,
            summary_candidates: 1,
            loop_semantics: LoopSemantics::AlgorithmOne,
            final_stage: StageKind::Conclusion,
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed: 0,
            concurrency: 1,
        }
    }
}

impl SearchConfig {
    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn cutoff(&self) -> f64 {
        backtrack_cutoff(&self.stats, self.z)
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |msg: &str| Err(SearchError::Config(msg.to_string()));
        if self.n == 0 {
            return bad("n must be positive");
        }
        if self.concurrency == 0 {
            return bad("concurrency must be positive");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be finite and >= 0");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive");
        }
        if self.strategy == Strategy::BestOfN {
            return Ok(());
        }
        if self.m == 0 || self.summary_candidates == 0 {
            return bad("m and summary_candidates must be positive");
        }
        if !self.m.is_multiple_of(self.n) {
            return bad("n must divide m");
        }
        if self.strategy == Strategy::Swires {
            self.stats.validate()?;
            if self.z.is_nan() {
                return bad("z must not be NaN");
            }
            if self.min_pass_count == 0 || self.min_pass_count > self.n {
                return bad("min_pass_count must lie in 1..=n");
            }
            if self.retrace_start >= self.final_stage {
                return bad("retrace_start must precede final_stage");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_table() {
        let c = SearchConfig::default();
        assert_eq!((c.m, c.n, c.retraces), (4, 2, 3));
        assert_eq!(c.z, 0.2533);
        assert_eq!(c.stats.reward_mean, -0.77);
        assert_eq!(c.stats.reward_std, 2.08);
        assert_eq!(c.retrace_start, StageKind::Caption);
        assert_eq!(c.loop_semantics, LoopSemantics::AlgorithmOne);
        c.validate().unwrap();
    }

    #[test]
    fn cutoff_examples() {
        let s = |m, sd| CalibrationStats {
            reward_mean: m,
            reward_std: sd,
            sample_count: 1,
        };
        assert!((backtrack_cutoff(&s(-0.77, 2.08), 0.2533) - (-0.243136)).abs() < 1e-9);
        assert_eq!(backtrack_cutoff(&s(0.0, 1.0), 0.0), 0.0);
        assert_eq!(backtrack_cutoff(&s(5.0, 0.0), 0.2533), 5.0);
        assert_eq!(backtrack_cutoff(&s(5.0, 0.0), f64::INFINITY), 5.0);
        assert_eq!(backtrack_cutoff(&s(0.0, 1.0), f64::NEG_INFINITY), f64::NEG_INFINITY);
    }

    #[test]
    fn loop_semantics_pass_counts() {
        assert_eq!(LoopSemantics::AlgorithmOne.max_passes(0), 1);
        assert_eq!(LoopSemantics::AlgorithmOne.max_passes(1), 1);
        assert_eq!(LoopSemantics::AlgorithmOne.max_passes(3), 3);
        assert_eq!(LoopSemantics::MainText.max_passes(0), 1);
        assert_eq!(LoopSemantics::MainText.max_passes(3), 4);
    }

    #[test]
    fn validation() {
        let c = SearchConfig {
            m: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = SearchConfig {
            min_pass_count: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = SearchConfig {
            retrace_start: StageKind::Conclusion,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = SearchConfig {
            strategy: Strategy::BestOfN,
            n: 3,
            ..Default::default()
        };
        c.validate().unwrap();
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("swires".parse::<Strategy>().unwrap(), Strategy::Swires);
        assert_eq!("beam".parse::<Strategy>().unwrap(), Strategy::StageBeam);
        assert_eq!("best-of-n".parse::<Strategy>().unwrap(), Strategy::BestOfN);
        assert!(matches!(
            "mcts".parse::<Strategy>(),
            Err(SearchError::Config(_))
        ));
    }
}
