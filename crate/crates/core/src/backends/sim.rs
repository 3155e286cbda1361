//! Simulated generator and reward model with latent per-stage correctness.
//!
//! Each generated stage is correct with probability `success[k]` when every
//! prior stage is correct and `recovery[k]` otherwise. Correctness is
//! carried in-band as a sentinel `[[sim:ok:<nonce>]]` / `[[sim:bad:<nonce>]]`
//! at the end of the block text. Search code never looks at it; the sim
//! scorer and the harness's hidden-flag grader do.

use serde::{Deserialize, Serialize};

use super::{
    BackendError, ChatModel, Generator, GeneratorRequest, RewardModel, RewardRequest, RewardScore,
    Sampling, DEFAULT_MAX_NEW_TOKENS, DEFAULT_TEMPERATURE,
};
use crate::keyed;
use crate::stages::{StageBlock, StageKind, StagedResponse, TagSchema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimWorldConfig {
    /// Per-stage success probability given all prior stages correct.
    pub success: [f64; 4],
    /// Per-stage probability of a correct block after an earlier mistake.
    pub recovery: [f64; 4],
    pub mean_correct: f64,
    pub mean_incorrect: f64,
    pub noise_std: f64,
    /// Per-stage probability of emitting text that breaks the tag grammar.
    pub malformed: [f64; 4],
    pub seed: u64,
}

impl Default for SimWorldConfig {
    fn default() -> Self {
        SimWorldConfig {
            success: [1.0; 4],
            recovery: [0.0; 4],
            mean_correct: 1.0,
            mean_incorrect: -1.0,
            noise_std: 0.0,
            malformed: [0.0; 4],
            seed: 0,
        }
    }
}

impl SimWorldConfig {
    /// World W1: noisy reward, uncertain caption and reasoning.
    pub fn w1() -> Self {
        SimWorldConfig {
            success: [1.0, 0.6, 0.6, 0.9],
            noise_std: 0.8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let probs = self.success.iter().chain(&self.recovery).chain(&self.malformed);
        if probs.clone().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(BackendError::Config("probabilities must lie in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(BackendError::Config("noise_std must be finite and >= 0".into()));
        }
        if !self.mean_correct.is_finite() || !self.mean_incorrect.is_finite() {
            return Err(BackendError::Config("reward means must be finite".into()));
        }
        Ok(())
    }

    /// Probability that a full rollout ends with a correct conclusion.
    pub fn rollout_success(&self) -> f64 {
        // P(all correct so far) and P(current stage correct) evolve as a
        // two-state chain.
        let mut all_ok = 1.0;
        let mut last_ok = 1.0;
        for k in 0..4 {
            last_ok = all_ok * self.success[k] + (1.0 - all_ok) * self.recovery[k];
            all_ok *= self.success[k];
        }
        last_ok
    }
}

const SENTINEL_OPEN: &str = "[[sim:";

/// Reads the hidden correctness flag and nonce from a simulated block.
pub fn hidden_flag(text: &str) -> Option<(bool, u64)> {
    let at = text.rfind(SENTINEL_OPEN)?;
    let rest = &text[at + SENTINEL_OPEN.len()..];
    let end = rest.find("]]")?;
    let (verdict, nonce) = rest[..end].split_once(':')?;
    let ok = match verdict {
        "ok" => true,
        "bad" => false,
        _ => return None,
    };
    Some((ok, u64::from_str_radix(nonce, 16).ok()?))
}

/// True when the response's conclusion carries a correct hidden flag.
pub fn conclusion_is_correct(resp: &StagedResponse) -> bool {
    resp.conclusion()
        .and_then(hidden_flag)
        .is_some_and(|(ok, _)| ok)
}

#[derive(Debug, Clone)]
pub struct SimWorld {
    config: SimWorldConfig,
    schema: TagSchema,
}

impl SimWorld {
    pub fn new(config: SimWorldConfig) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(SimWorld {
            config,
            schema: TagSchema::default(),
        })
    }

    pub fn with_schema(mut self, schema: TagSchema) -> Self {
        self.schema = schema;
        self
    }

    pub fn config(&self) -> &SimWorldConfig {
        &self.config
    }

    fn stage_block(&self, question_id: u64, seed: u64, kind: StageKind, prior_ok: bool) -> StageBlock {
        let k = kind.index();
        let nonce = keyed::key(&[self.config.seed, question_id, k as u64, seed]);
        let p = if prior_ok {
            self.config.success[k]
        } else {
            self.config.recovery[k]
        };
        let ok = keyed::uniform(keyed::key(&[nonce, 1])) < p;
        let verdict = if ok { "ok" } else { "bad" };
        let malformed = keyed::uniform(keyed::key(&[nonce, 3])) < self.config.malformed[k];
        // A stray close tag of an earlier stage makes the continuation unparseable.
        let junk = if malformed {
            self.schema.close(StageKind::Summary).to_string()
        } else {
            String::new()
        };
        StageBlock {
            kind,
            text: format!("simulated {kind} {junk}[[sim:{verdict}:{nonce:016x}]]"),
        }
    }
}

impl Generator for SimWorld {
    fn generate(&self, req: &GeneratorRequest) -> Result<String, BackendError> {
        req.validate()?;
        let question_id = keyed::hash_str(&req.question);
        let seed = req.seed.unwrap_or(0);
        let mut prior_ok = req
            .prior_stages
            .blocks()
            .iter()
            .all(|b| hidden_flag(&b.text).is_some_and(|(ok, _)| ok));
        let mut parts = Vec::new();
        for k in req.target_stage.index()..=req.through_stage.index() {
            let kind = StageKind::ALL[k];
            let block = self.stage_block(question_id, seed, kind, prior_ok);
            prior_ok = prior_ok && hidden_flag(&block.text).is_some_and(|(ok, _)| ok);
            parts.push(format!(
                "{}{}{}",
                self.schema.open(kind),
                block.text,
                self.schema.close(kind)
            ));
        }
        // Continuations omit the target's open tag and the final stop marker.
        let joined = parts.join("\n");
        let text = joined
            .strip_prefix(self.schema.open(req.target_stage))
            .and_then(|t| t.strip_suffix(self.schema.close(req.through_stage)))
            .expect("rendered by this function")
            .to_string();
        Ok(text)
    }
}

impl RewardModel for SimWorld {
    fn score(&self, req: &RewardRequest) -> Result<RewardScore, BackendError> {
        req.validate()?;
        let last = req.trajectory.last().expect("validated non-empty");
        let (ok, nonce) = hidden_flag(&last.text).unwrap_or((false, 0));
        let mean = if ok {
            self.config.mean_correct
        } else {
            self.config.mean_incorrect
        };
        let z = if self.config.noise_std > 0.0 {
            keyed::standard_normal(keyed::key(&[self.config.seed, nonce, 2]))
        } else {
            0.0
        };
        RewardScore::new(mean + self.config.noise_std * z)
    }
}

/// Chat stand-in for offline data generation. A non-empty system prompt asks
/// for a full tagged response to the user text; an empty one asks for a
/// verdict, answered from the hidden flag found in the user text.
impl ChatModel for SimWorld {
    fn complete(&self, system: &str, user: &str) -> Result<String, BackendError> {
        if system.is_empty() {
            return Ok(match hidden_flag(user) {
                Some((true, _)) => "valid".to_string(),
                Some((false, _)) => "invalid".to_string(),
                None => "I cannot tell.".to_string(),
            });
        }
        let req = GeneratorRequest {
            question: user.to_string(),
            image_ref: None,
            prior_stages: StagedResponse::new(),
            target_stage: StageKind::Summary,
            through_stage: StageKind::Conclusion,
            sampling: Sampling {
                temperature: DEFAULT_TEMPERATURE,
                max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
                stop: self.schema.close(StageKind::Conclusion).to_string(),
            },
            seed: Some(keyed::hash_str(user)),
        };
        let body = self.generate(&req)?;
        Ok(format!(
            "{}{}{}",
            self.schema.open(StageKind::Summary),
            body,
            self.schema.close(StageKind::Conclusion)
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stages::{parse_continuation, stop_marker};

    fn request(prior: StagedResponse, target: StageKind, through: StageKind, seed: u64) -> GeneratorRequest {
        let schema = TagSchema::default();
        GeneratorRequest {
            question: "what is shown?".into(),
            image_ref: None,
            prior_stages: prior,
            target_stage: target,
            through_stage: through,
            sampling: Sampling {
                temperature: 1.0,
                max_new_tokens: 64,
                stop: stop_marker(through, &schema).into(),
            },
            seed: Some(seed),
        }
    }

    fn rollout(world: &SimWorld, seed: u64) -> StagedResponse {
        let schema = TagSchema::default();
        let mut resp = StagedResponse::new();
        for kind in StageKind::ALL {
            let raw = world.generate(&request(resp.clone(), kind, kind, seed)).unwrap();
            let blocks = parse_continuation(&raw, kind, kind, &schema).unwrap();
            resp.push(blocks[0].clone()).unwrap();
        }
        resp
    }

    #[test]
    fn certain_world_is_always_correct() {
        let world = SimWorld::new(SimWorldConfig::default()).unwrap();
        for seed in 0..50 {
            let r = rollout(&world, seed);
            assert!(r.blocks().iter().all(|b| hidden_flag(&b.text).unwrap().0));
        }
    }

    #[test]
    fn zero_caption_success_forces_bad_caption() {
        let world = SimWorld::new(SimWorldConfig {
            success: [1.0, 0.0, 1.0, 1.0],
            ..Default::default()
        })
        .unwrap();
        for seed in 0..50 {
            let r = rollout(&world, seed);
            assert!(hidden_flag(&r.blocks()[0].text).unwrap().0);
            assert!(!hidden_flag(&r.blocks()[1].text).unwrap().0);
            assert!(!conclusion_is_correct(&r));
        }
    }

    #[test]
    fn recovery_probability_applies_after_mistake() {
        let world = SimWorld::new(SimWorldConfig {
            success: [1.0, 0.0, 1.0, 1.0],
            recovery: [0.0, 0.0, 1.0, 1.0],
            ..Default::default()
        })
        .unwrap();
        assert!(conclusion_is_correct(&rollout(&world, 3)));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SimWorldConfig::w1();
        let a = SimWorld::new(cfg.clone()).unwrap();
        let b = SimWorld::new(cfg).unwrap();
        for seed in 0..20 {
            assert_eq!(rollout(&a, seed), rollout(&b, seed));
        }
        assert_ne!(rollout(&a, 1), rollout(&a, 2));
    }

    #[test]
    fn full_response_matches_stagewise_texts() {
        let world = SimWorld::new(SimWorldConfig::w1()).unwrap();
        let schema = TagSchema::default();
        let raw = world
            .generate(&request(StagedResponse::new(), StageKind::Summary, StageKind::Conclusion, 11))
            .unwrap();
        let blocks = parse_continuation(&raw, StageKind::Summary, StageKind::Conclusion, &schema).unwrap();
        assert_eq!(blocks, rollout(&world, 11).blocks());
    }

    #[test]
    fn perfect_reward_values() {
        let world = SimWorld::new(SimWorldConfig {
            success: [1.0, 0.0, 1.0, 1.0],
            ..Default::default()
        })
        .unwrap();
        let r = rollout(&world, 0);
        let score = |t: StagedResponse| {
            world
                .score(&RewardRequest {
                    question: "q".into(),
                    image_ref: None,
                    trajectory: t,
                })
                .unwrap()
                .value()
        };
        assert_eq!(score(r.through(StageKind::Summary).unwrap()), 1.0);
        assert_eq!(score(r.through(StageKind::Caption).unwrap()), -1.0);
    }

    #[test]
    fn noisy_reward_is_reproducible() {
        let cfg = SimWorldConfig {
            noise_std: 0.5,
            ..Default::default()
        };
        let a = SimWorld::new(cfg.clone()).unwrap();
        let b = SimWorld::new(cfg).unwrap();
        let r = rollout(&a, 5);
        let req = RewardRequest {
            question: "q".into(),
            image_ref: None,
            trajectory: r,
        };
        let x = a.score(&req).unwrap().value();
        assert_eq!(x.to_bits(), b.score(&req).unwrap().value().to_bits());
        assert_ne!(x, 1.0);
    }

    #[test]
    fn malformed_output_fails_to_parse() {
        let world = SimWorld::new(SimWorldConfig {
            malformed: [0.0, 1.0, 0.0, 0.0],
            ..Default::default()
        })
        .unwrap();
        let mut prior = StagedResponse::new();
        prior.push(StageBlock::new(StageKind::Summary, "s")).unwrap();
        let raw = world
            .generate(&request(prior, StageKind::Caption, StageKind::Caption, 0))
            .unwrap();
        assert!(parse_continuation(&raw, StageKind::Caption, StageKind::Caption, &TagSchema::default()).is_err());
    }

    #[test]
    fn rollout_success_closed_form() {
        assert!((SimWorldConfig::w1().rollout_success() - 0.324).abs() < 1e-12);
        let cfg = SimWorldConfig {
            success: [1.0, 0.5, 1.0, 1.0],
            recovery: [0.0, 0.0, 0.0, 0.5],
            ..Default::default()
        };
        assert!((cfg.rollout_success() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_probabilities() {
        let cfg = SimWorldConfig {
            success: [1.5, 1.0, 1.0, 1.0],
            ..Default::default()
        };
        assert!(SimWorld::new(cfg).is_err());
    }
}
