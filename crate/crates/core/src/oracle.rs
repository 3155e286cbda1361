//! Exact strategy accuracies for noise-free simulated worlds.
//!
//! Each strategy is re-expressed over correctness bits alone and run against
//! every combination of generator outcomes. A run asks for Bernoulli draws
//! one at a time; when it needs a draw beyond the current path, the path is
//! forked on both outcomes. Summing path weights gives exact probabilities.
//!
//! Nothing here calls into [`crate::search`]; it only reads the config
//! fields, so it can check the engine independently.

use std::cmp::Ordering;

use crate::backends::sim::SimWorldConfig;
use crate::search::{LoopSemantics, SearchConfig, Strategy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResult {
    pub accuracy: f64,
    pub expected_generator_calls: f64,
    pub paths: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("oracle needs a noise-free reward (noise_std = 0)")]
    NoisyReward,
    #[error("enumeration exceeds {0} paths")]
    TooManyPaths(usize),
}

struct NeedDraw(f64);

struct Path<'a> {
    bits: &'a [bool],
    pos: usize,
    calls: usize,
}

impl Path<'_> {
    fn bern(&mut self, p: f64) -> Result<bool, NeedDraw> {
        if p <= 0.0 {
            return Ok(false);
        }
        if p >= 1.0 {
            return Ok(true);
        }
        let bit = *self.bits.get(self.pos).ok_or(NeedDraw(p))?;
        self.pos += 1;
        Ok(bit)
    }
}

#[derive(Clone, Copy)]
struct Node {
    all_ok: bool,
    last_ok: bool,
    born: usize,
}

struct Model<'a> {
    world: &'a SimWorldConfig,
    cfg: &'a SearchConfig,
    born: usize,
}

impl Model<'_> {
    fn reward(&self, n: &Node) -> f64 {
        if n.last_ok {
            self.world.mean_correct
        } else {
            self.world.mean_incorrect
        }
    }

    fn child(&mut self, path: &mut Path<'_>, parent: Option<&Node>, stage: usize) -> Result<Node, NeedDraw> {
        path.calls += 1;
        self.extend(path, parent, stage)
    }

    /// Draws one more stage below `parent` without counting a call.
    fn extend(&mut self, path: &mut Path<'_>, parent: Option<&Node>, stage: usize) -> Result<Node, NeedDraw> {
        let prior_ok = parent.is_none_or(|p| p.all_ok);
        let p = if prior_ok {
            self.world.success[stage]
        } else {
            self.world.recovery[stage]
        };
        let ok = path.bern(p)?;
        let born = self.born;
        self.born += 1;
        Ok(Node {
            all_ok: prior_ok && ok,
            last_ok: ok,
            born,
        })
    }

    fn top(&self, mut nodes: Vec<Node>, n: usize) -> Vec<Node> {
        nodes.sort_by(|a, b| {
            self.reward(b)
                .partial_cmp(&self.reward(a))
                .unwrap_or(Ordering::Equal)
                .then(a.born.cmp(&b.born))
        });
        nodes.truncate(n);
        nodes
    }

    /// Children of `parents` at `stage`: `first` fresh samples at stage 0,
    /// one per parent at the final stage, `M` spread over parents otherwise.
    fn layer(&mut self, path: &mut Path<'_>, parents: &[Node], stage: usize) -> Result<Vec<Node>, NeedDraw> {
        let last = self.cfg.final_stage.index();
        let mut out = Vec::new();
        if stage == 0 {
            for _ in 0..self.cfg.summary_candidates {
                out.push(self.child(path, None, 0)?);
            }
        } else if stage == last {
            for p in parents {
                out.push(self.child(path, Some(p), stage)?);
            }
        } else {
            let base = self.cfg.m / parents.len();
            let extra = self.cfg.m % parents.len();
            for (i, p) in parents.iter().enumerate() {
                for _ in 0..base + usize::from(i < extra) {
                    out.push(self.child(path, Some(p), stage)?);
                }
            }
        }
        Ok(out)
    }

    /// Beam step for a non-final stage.
    fn prune(&self, nodes: Vec<Node>, stage: usize) -> Vec<Node> {
        if stage == 0 && nodes.len() == 1 {
            nodes
        } else {
            self.top(nodes, self.cfg.n)
        }
    }

    fn best_of_n(&mut self, path: &mut Path<'_>) -> Result<bool, NeedDraw> {
        let last = self.cfg.final_stage.index();
        let mut finals = Vec::new();
        for _ in 0..self.cfg.n {
            path.calls += 1;
            let mut node: Option<Node> = None;
            for stage in 0..=last {
                node = Some(self.extend(path, node.as_ref(), stage)?);
            }
            finals.push(node.expect("at least one stage"));
        }
        Ok(self.top(finals, 1)[0].last_ok)
    }

    fn beam(&mut self, path: &mut Path<'_>) -> Result<bool, NeedDraw> {
        let last = self.cfg.final_stage.index();
        let mut survivors = Vec::new();
        for stage in 0..last {
            let layer = self.layer(path, &survivors, stage)?;
            survivors = self.prune(layer, stage);
        }
        let finals = self.layer(path, &survivors, last)?;
        Ok(self.top(finals, 1)[0].last_ok)
    }

    fn swires(&mut self, path: &mut Path<'_>) -> Result<bool, NeedDraw> {
        let last = self.cfg.final_stage.index();
        let check = last - 1;
        let start = self.cfg.retrace_start.index();
        let cutoff = crate_cutoff(self.cfg);
        let passes = match self.cfg.loop_semantics {
            LoopSemantics::AlgorithmOne => self.cfg.retraces.max(1),
            LoopSemantics::MainText => self.cfg.retraces + 1,
        };
        let mut fixed = Vec::new();
        for stage in 0..start {
            let layer = self.layer(path, &fixed, stage)?;
            fixed = self.prune(layer, stage);
        }
        let mut pool = Vec::new();
        for _ in 0..passes {
            let mut survivors = fixed.clone();
            for stage in start..check {
                let layer = self.layer(path, &survivors, stage)?;
                survivors = self.prune(layer, stage);
            }
            let checked = self.layer(path, &survivors, check)?;
            let passing = checked.iter().filter(|n| self.reward(n) > cutoff).count();
            pool.extend(checked);
            if passing >= self.cfg.min_pass_count {
                break;
            }
        }
        let kept = self.top(pool, self.cfg.n);
        let finals = self.layer(path, &kept, last)?;
        Ok(self.top(finals, 1)[0].last_ok)
    }
}

fn crate_cutoff(cfg: &SearchConfig) -> f64 {
    let s = &cfg.stats;
    if cfg.z == 0.0 || s.reward_std == 0.0 {
        s.reward_mean
    } else {
        s.reward_mean + cfg.z * s.reward_std
    }
}

pub const DEFAULT_PATH_LIMIT: usize = 5_000_000;

/// Exact accuracy of `cfg.strategy` in `world` (which must be noise-free).
pub fn exact_accuracy(world: &SimWorldConfig, cfg: &SearchConfig) -> Result<OracleResult, OracleError> {
    exact_accuracy_limited(world, cfg, DEFAULT_PATH_LIMIT)
}

pub fn exact_accuracy_limited(
    world: &SimWorldConfig,
    cfg: &SearchConfig,
    limit: usize,
) -> Result<OracleResult, OracleError> {
    if world.noise_std != 0.0 {
        return Err(OracleError::NoisyReward);
    }
    let mut accuracy = 0.0;
    let mut calls = 0.0;
    let mut paths = 0;
    let mut stack: Vec<(Vec<bool>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((bits, weight)) = stack.pop() {
        let mut model = Model { world, cfg, born: 0 };
        let mut path = Path { bits: &bits, pos: 0, calls: 0 };
        let result = match cfg.strategy {
            Strategy::BestOfN => model.best_of_n(&mut path),
            Strategy::StageBeam => model.beam(&mut path),
            Strategy::Swires => model.swires(&mut path),
        };
        match result {
            Ok(correct) => {
                paths += 1;
                if paths > limit {
                    return Err(OracleError::TooManyPaths(limit));
                }
                if correct {
                    accuracy += weight;
                }
                calls += weight * path.calls as f64;
            }
            Err(NeedDraw(p)) => {
                let mut yes = bits.clone();
                yes.push(true);
                let mut no = bits;
                no.push(false);
                stack.push((no, weight * (1.0 - p)));
                stack.push((yes, weight * p));
            }
        }
    }
    Ok(OracleResult {
        accuracy,
        expected_generator_calls: calls,
        paths,
    })
}

/// A world/config pair whose exact accuracy is compared against sampling.
#[derive(Debug, Clone)]
pub struct CheckCase {
    pub name: String,
    pub world: SimWorldConfig,
    pub search: SearchConfig,
    /// Independent closed form, where one exists.
    pub closed_form: Option<f64>,
}

/// Small noise-free worlds: two uncertain stages searched with two
/// candidates, one survivor and one retrace, plus best-of-n at p = 0.5.
pub fn check_cases() -> Vec<CheckCase> {
    let two_stage = SimWorldConfig {
        success: [1.0, 0.6, 0.7, 1.0],
        recovery: [0.0, 0.0, 0.2, 0.0],
        ..Default::default()
    };
    let small = SearchConfig {
        m: 2,
        n: 1,
        retraces: 1,
        loop_semantics: LoopSemantics::MainText,
        z: 0.0,
        stats: crate::search::CalibrationStats {
            reward_mean: 0.0,
            reward_std: 1.0,
            sample_count: 1,
        },
        ..Default::default()
    };
    let mut cases = vec![
        CheckCase {
            name: "two-stage best-of-2".into(),
            world: two_stage.clone(),
            search: SearchConfig {
                n: 2,
                ..small.clone().with_strategy(Strategy::BestOfN)
            },
            closed_form: None,
        },
        CheckCase {
            name: "two-stage beam m2 n1".into(),
            world: two_stage.clone(),
            search: small.clone().with_strategy(Strategy::StageBeam),
            closed_form: None,
        },
        CheckCase {
            name: "two-stage swires m2 n1 c1".into(),
            world: two_stage,
            search: small.clone().with_strategy(Strategy::Swires),
            closed_form: None,
        },
    ];
    let coin = SimWorldConfig {
        success: [1.0, 1.0, 1.0, 0.5],
        ..Default::default()
    };
    for n in [1usize, 3, 4, 8] {
        cases.push(CheckCase {
            name: format!("best-of-{n} p=0.5"),
            world: coin.clone(),
            search: SearchConfig {
                n,
                ..SearchConfig::default().with_strategy(Strategy::BestOfN)
            },
            closed_form: Some(1.0 - 0.5f64.powi(n as i32)),
        });
    }
    cases
}
