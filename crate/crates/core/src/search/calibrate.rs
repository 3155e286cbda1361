//! Reward statistics over reasoning-stage trajectories, used to set the cutoff.

use serde::{Deserialize, Serialize};

use super::{generation_seed, CalibrationStats, SearchError};
use crate::backends::{Generator, GeneratorRequest, RewardModel, RewardRequest, Sampling};
use crate::stages::{parse_continuation, stop_marker, StageKind, StagedResponse, TagSchema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationItem {
    pub question: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    /// A trajectory reaching at least the reasoning stage; later stages are ignored.
    pub trajectory: StagedResponse,
}

/// Mean and sample standard deviation of one value list (std is 0 when n = 1).
pub fn summarize(scores: &[f64]) -> Result<CalibrationStats, SearchError> {
    if scores.is_empty() {
        return Err(SearchError::EmptyCorpus);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = if scores.len() == 1 {
        0.0
    } else {
        (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(CalibrationStats {
        reward_mean: mean,
        reward_std: std,
        sample_count: scores.len() as u64,
    })
}

/// Scores each item's reasoning-stage prefix and summarizes the scores.
pub fn calibrate(
    reward: &dyn RewardModel,
    corpus: &[CalibrationItem],
) -> Result<CalibrationStats, SearchError> {
    if corpus.is_empty() {
        return Err(SearchError::EmptyCorpus);
    }
    let scores = corpus
        .iter()
        .map(|item| score_reasoning(reward, item))
        .collect::<Result<Vec<_>, _>>()?;
    summarize(&scores)
}

/// Reward of the item's trajectory truncated after the reasoning stage.
pub fn score_reasoning(reward: &dyn RewardModel, item: &CalibrationItem) -> Result<f64, SearchError> {
    let trajectory = item.trajectory.through(StageKind::Reasoning).ok_or_else(|| {
        SearchError::Config(format!("calibration item {:?} has no reasoning stage", item.question))
    })?;
    let score = reward.score(&RewardRequest {
        question: item.question.clone(),
        image_ref: item.image_ref.clone(),
        trajectory,
    })?;
    Ok(score.value())
}

/// One unguided stage-by-stage rollout through `last`.
pub fn rollout(
    generator: &dyn Generator,
    question: &str,
    image_ref: Option<&str>,
    last: StageKind,
    seed: u64,
    schema: &TagSchema,
) -> Result<StagedResponse, SearchError> {
    let mut resp = StagedResponse::new();
    for stage in StageKind::ALL.into_iter().take(last.index() + 1) {
        let req = GeneratorRequest {
            question: question.to_string(),
            image_ref: image_ref.map(str::to_string),
            prior_stages: resp.clone(),
            target_stage: stage,
            through_stage: stage,
            sampling: Sampling {
                temperature: crate::backends::DEFAULT_TEMPERATURE,
                max_new_tokens: crate::backends::DEFAULT_MAX_NEW_TOKENS,
                stop: stop_marker(stage, schema).to_string(),
            },
            seed: Some(generation_seed(seed, stage, 0, 0)),
        };
        let raw = generator.generate(&req)?;
        let blocks = parse_continuation(&raw, stage, stage, schema)
            .map_err(|e| SearchError::Config(format!("rollout produced unparseable {stage}: {e}")))?;
        resp.extend_blocks(blocks);
    }
    Ok(resp)
}
