//! Best-of-N, stage-wise beam search and stage-wise retracing search.
//!
//! All three share one generation/scoring path so that, under equal seeds,
//! a retracing search that never retraces emits exactly the beam search's
//! events. Backend calls within a stage may run concurrently; results are
//! always consumed in candidate-index order.

use std::collections::BTreeMap;
use std::thread;
use std::time::Instant;

use super::select::{select_top, Birth, Candidate};
use super::trace::{digest, SearchTrace, TraceEvent, TraceHeader};
use super::{BudgetLedger, FinalAnswer, Query, SearchConfig, SearchError, SearchReport, Strategy};
use crate::backends::{Generator, GeneratorRequest, RewardModel, RewardRequest, Sampling};
use crate::keyed;
use crate::stages::{parse_continuation, stop_marker, StageKind, TagSchema};

/// Seed for the `slot`-th generation of `stage` in `pass`.
pub fn generation_seed(run_seed: u64, stage: StageKind, pass: usize, slot: usize) -> u64 {
    keyed::key(&[run_seed, stage.index() as u64, pass as u64, slot as u64])
}

struct Run<'a> {
    query: &'a Query,
    cfg: &'a SearchConfig,
    schema: &'a TagSchema,
    generator: &'a dyn Generator,
    reward: &'a dyn RewardModel,
    trace: SearchTrace,
    ledger: BudgetLedger,
    next_index: u64,
}

/// Children to generate from one parent (or from the empty root).
struct Expansion<'p> {
    parent: Option<&'p Candidate>,
    count: usize,
}

/// Runs `f` over `items`, up to `concurrency` at a time, preserving order.
fn map_ordered<T, R, F>(items: &[T], concurrency: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if concurrency <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(concurrency);
    thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("backend worker panicked"))
            .collect()
    })
}

/// Splits `total` children across `parents` as evenly as possible, earlier parents first.
fn spread(total: usize, parents: usize) -> Vec<usize> {
    let base = total / parents;
    let extra = total % parents;
    (0..parents).map(|i| base + usize::from(i < extra)).collect()
}

impl<'a> Run<'a> {
    fn new(
        query: &'a Query,
        cfg: &'a SearchConfig,
        schema: &'a TagSchema,
        generator: &'a dyn Generator,
        reward: &'a dyn RewardModel,
    ) -> Self {
        let header = TraceHeader {
            strategy: cfg.strategy,
            question_digest: digest(query.question.as_bytes()),
            config: cfg.clone(),
        };
        Run {
            query,
            cfg,
            schema,
            generator,
            reward,
            trace: SearchTrace::new(header),
            ledger: BudgetLedger::default(),
            next_index: 0,
        }
    }

    /// Generates candidates for stages `stage..=through` from each expansion.
    fn generate(
        &mut self,
        expansions: &[Expansion<'_>],
        stage: StageKind,
        through: StageKind,
        pass: usize,
    ) -> Result<Vec<Candidate>, SearchError> {
        let mut requests = Vec::new();
        for exp in expansions {
            for _ in 0..exp.count {
                let slot = requests.len();
                let seed = generation_seed(self.cfg.seed, stage, pass, slot);
                let prior = exp
                    .parent
                    .map(|p| p.trajectory.clone())
                    .unwrap_or_default();
                let req = GeneratorRequest {
                    question: self.query.question.clone(),
                    image_ref: self.query.image_ref.clone(),
                    prior_stages: prior,
                    target_stage: stage,
                    through_stage: through,
                    sampling: Sampling {
                        temperature: self.cfg.temperature,
                        max_new_tokens: self.cfg.max_new_tokens,
                        stop: stop_marker(through, self.schema).to_string(),
                    },
                    seed: Some(seed),
                };
                requests.push((exp.parent, req));
            }
        }
        let generator = self.generator;
        let outputs = map_ordered(&requests, self.cfg.concurrency, |(_, req)| {
            generator.generate(req)
        });

        // Every request was sent, even if an earlier one failed.
        for _ in &outputs {
            self.ledger.record_generation(stage);
        }
        let mut cands = Vec::with_capacity(requests.len());
        for ((parent, req), output) in requests.iter().zip(outputs) {
            let raw = output?;
            let index = self.next_index;
            self.next_index += 1;
            let input = serde_json::to_vec(req).expect("request serializes");
            let (trajectory, parse_error) =
                match parse_continuation(&raw, stage, through, self.schema) {
                    Ok(blocks) => {
                        let mut t = req.prior_stages.clone();
                        t.extend_blocks(blocks);
                        (t, None)
                    }
                    Err(e) => (req.prior_stages.clone(), Some(e.to_string())),
                };
            self.trace.push(TraceEvent::Generate {
                stage,
                through,
                pass,
                candidate: index,
                parent: parent.map(Candidate::id),
                seed: req.seed.unwrap_or_default(),
                input_digest: digest(&input),
                output_digest: digest(raw.as_bytes()),
                parse_error: parse_error.clone(),
            });
            cands.push(Candidate {
                trajectory,
                stage_scores: BTreeMap::new(),
                parent: parent.map(Candidate::id),
                birth: Birth { pass, index },
                parse_error,
            });
        }
        Ok(cands)
    }

    /// Scores every parsed candidate at `stage`; unparsed ones stay at −∞.
    fn score(
        &mut self,
        cands: &mut [Candidate],
        stage: StageKind,
        pass: usize,
    ) -> Result<(), SearchError> {
        let requests: Vec<Option<RewardRequest>> = cands
            .iter()
            .map(|c| {
                c.is_parsed().then(|| RewardRequest {
                    question: self.query.question.clone(),
                    image_ref: self.query.image_ref.clone(),
                    trajectory: c.trajectory.clone(),
                })
            })
            .collect();
        let reward = self.reward;
        let results = map_ordered(&requests, self.cfg.concurrency, |req| {
            req.as_ref().map(|r| reward.score(r))
        });
        for _ in results.iter().flatten() {
            self.ledger.record_score(stage);
        }
        for (cand, result) in cands.iter_mut().zip(results) {
            let score = match result {
                None => None,
                Some(r) => {
                    let s = r?;
                    cand.stage_scores.insert(stage, s);
                    Some(s.value())
                }
            };
            self.trace.push(TraceEvent::Score {
                stage,
                pass,
                candidate: cand.id(),
                score,
            });
        }
        Ok(())
    }

    /// Keeps the best `n` parsed candidates (fewer if fewer parsed).
    fn keep_top(
        &mut self,
        cands: &[Candidate],
        n: usize,
        stage: StageKind,
        pass: usize,
    ) -> Result<Vec<Candidate>, SearchError> {
        let parsed: Vec<Candidate> = cands.iter().filter(|c| c.is_parsed()).cloned().collect();
        if parsed.is_empty() {
            return Err(SearchError::SearchExhausted { stage });
        }
        let kept = select_top(&parsed, n.min(parsed.len()), stage)?;
        self.trace.push(TraceEvent::Select {
            stage,
            pass,
            kept: kept.iter().map(Candidate::id).collect(),
            scores: kept.iter().map(|c| finite(c.score_at(stage))).collect(),
        });
        Ok(kept)
    }

    fn finish(&mut self, best: &Candidate, stage: StageKind) -> FinalAnswer {
        let score = best.score_at(stage);
        self.trace.push(TraceEvent::Final {
            candidate: best.id(),
            score: finite(score),
        });
        FinalAnswer {
            response: best.trajectory.clone(),
            score,
            candidate: best.id(),
        }
    }

    /// Candidates for one stage of a stage-wise search.
    ///
    /// The first stage samples `summary_candidates` from scratch, the final
    /// stage one child per survivor, and every other stage `M` children spread
    /// over the survivors.
    fn stage_candidates(
        &mut self,
        survivors: &[Candidate],
        stage: StageKind,
        pass: usize,
    ) -> Result<Vec<Candidate>, SearchError> {
        let expansions: Vec<Expansion<'_>> = if stage == StageKind::Summary {
            vec![Expansion {
                parent: None,
                count: self.cfg.summary_candidates,
            }]
        } else if stage == self.cfg.final_stage {
            survivors
                .iter()
                .map(|p| Expansion {
                    parent: Some(p),
                    count: 1,
                })
                .collect()
        } else {
            spread(self.cfg.m, survivors.len())
                .into_iter()
                .zip(survivors)
                .map(|(count, p)| Expansion {
                    parent: Some(p),
                    count,
                })
                .collect()
        };
        self.generate(&expansions, stage, stage, pass)
    }

    /// The first stage goes unscored when it yields a single candidate that
    /// nothing downstream needs to rank.
    fn needs_scoring(&self, stage: StageKind, count: usize, must: bool) -> bool {
        must || stage == self.cfg.final_stage || !(stage == StageKind::Summary && count == 1)
    }

    /// Generates, scores and prunes one non-final stage.
    fn beam_step(
        &mut self,
        survivors: &[Candidate],
        stage: StageKind,
        pass: usize,
    ) -> Result<Vec<Candidate>, SearchError> {
        let mut cands = self.stage_candidates(survivors, stage, pass)?;
        if self.needs_scoring(stage, cands.len(), false) {
            self.score(&mut cands, stage, pass)?;
            self.keep_top(&cands, self.cfg.n, stage, pass)
        } else {
            let parsed: Vec<Candidate> = cands.into_iter().filter(|c| c.is_parsed()).collect();
            if parsed.is_empty() {
                return Err(SearchError::SearchExhausted { stage });
            }
            Ok(parsed)
        }
    }

    /// One child per survivor at the final stage, then argmax.
    fn final_step(&mut self, survivors: &[Candidate], pass: usize) -> Result<FinalAnswer, SearchError> {
        let stage = self.cfg.final_stage;
        let mut cands = self.stage_candidates(survivors, stage, pass)?;
        self.score(&mut cands, stage, pass)?;
        let best = self.keep_top(&cands, 1, stage, pass)?;
        Ok(self.finish(&best[0], stage))
    }

    fn best_of_n(&mut self) -> Result<FinalAnswer, SearchError> {
        let stage = self.cfg.final_stage;
        let root = [Expansion {
            parent: None,
            count: self.cfg.n,
        }];
        let mut cands = self.generate(&root, StageKind::Summary, stage, 0)?;
        self.score(&mut cands, stage, 0)?;
        let best = self.keep_top(&cands, 1, stage, 0)?;
        Ok(self.finish(&best[0], stage))
    }

    fn stage_wise_beam(&mut self) -> Result<FinalAnswer, SearchError> {
        let mut survivors = Vec::new();
        for stage in StageKind::ALL {
            if stage == self.cfg.final_stage {
                // In a one-stage pipeline the sampled summaries are the answers.
                return self.final_step(&survivors, 0);
            }
            survivors = self.beam_step(&survivors, stage, 0)?;
        }
        unreachable!("final_stage is one of the four stages")
    }

    fn swires(&mut self) -> Result<FinalAnswer, SearchError> {
        let cfg = self.cfg;
        let check_stage = cfg
            .final_stage
            .prev()
            .expect("validated: final_stage follows retrace_start");
        let mut fixed = Vec::new();
        for stage in StageKind::ALL.into_iter().take(cfg.retrace_start.index()) {
            fixed = self.beam_step(&fixed, stage, 0)?;
        }

        let cutoff = cfg.cutoff();
        let max_passes = cfg.loop_semantics.max_passes(cfg.retraces);
        let mut pool: Vec<Candidate> = Vec::new();
        let mut last_pass = 0;
        for pass in 0..max_passes {
            last_pass = pass;
            let mut survivors = fixed.clone();
            let mut passing = 0;
            for k in cfg.retrace_start.index()..=check_stage.index() {
                let stage = StageKind::ALL[k];
                if stage != check_stage {
                    match self.beam_step(&survivors, stage, pass) {
                        Ok(kept) => survivors = kept,
                        // Nothing parsed in this pass; count it as failed.
                        Err(SearchError::SearchExhausted { .. }) => break,
                        Err(e) => return Err(e),
                    }
                    continue;
                }
                let mut cands = self.stage_candidates(&survivors, stage, pass)?;
                self.score(&mut cands, stage, pass)?;
                passing = cands.iter().filter(|c| c.score_at(stage) > cutoff).count();
                pool.extend(cands.into_iter().filter(Candidate::is_parsed));
            }
            if passing >= cfg.min_pass_count {
                break;
            }
            if pass + 1 < max_passes {
                self.trace.push(TraceEvent::Retrace {
                    after_pass: pass,
                    cutoff,
                    passing,
                    required: cfg.min_pass_count,
                });
            }
        }

        if pool.is_empty() {
            return Err(SearchError::SearchExhausted { stage: check_stage });
        }
        let kept = self.keep_top(&pool, cfg.n, check_stage, last_pass)?;
        self.final_step(&kept, last_pass)
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Runs the strategy named by `cfg.strategy`.
pub fn run_strategy(
    query: &Query,
    cfg: &SearchConfig,
    schema: &TagSchema,
    generator: &dyn Generator,
    reward: &dyn RewardModel,
) -> SearchReport {
    let started = Instant::now();
    let mut run = Run::new(query, cfg, schema, generator, reward);
    let outcome = cfg.validate().and_then(|_| match cfg.strategy {
        Strategy::BestOfN => run.best_of_n(),
        Strategy::StageBeam => run.stage_wise_beam(),
        Strategy::Swires => run.swires(),
    });
    run.ledger.wall_time_secs = started.elapsed().as_secs_f64();
    SearchReport {
        outcome,
        trace: run.trace,
        ledger: run.ledger,
    }
}

/// Best-of-`n`: `n` complete responses, each scored once, argmax returned.
pub fn best_of_n(
    query: &Query,
    n: usize,
    cfg: &SearchConfig,
    schema: &TagSchema,
    generator: &dyn Generator,
    reward: &dyn RewardModel,
) -> SearchReport {
    let cfg = SearchConfig {
        strategy: Strategy::BestOfN,
        n,
        ..cfg.clone()
    };
    run_strategy(query, &cfg, schema, generator, reward)
}

pub fn stage_wise_beam(
    query: &Query,
    cfg: &SearchConfig,
    schema: &TagSchema,
    generator: &dyn Generator,
    reward: &dyn RewardModel,
) -> SearchReport {
    run_strategy(query, &cfg.clone().with_strategy(Strategy::StageBeam), schema, generator, reward)
}

pub fn swires(
    query: &Query,
    cfg: &SearchConfig,
    schema: &TagSchema,
    generator: &dyn Generator,
    reward: &dyn RewardModel,
) -> SearchReport {
    run_strategy(query, &cfg.clone().with_strategy(Strategy::Swires), schema, generator, reward)
}

/// Re-runs the search described by `trace` and reports whether it
/// reproduces every event.
pub fn replay(
    trace: &SearchTrace,
    query: &Query,
    schema: &TagSchema,
    generator: &dyn Generator,
    reward: &dyn RewardModel,
) -> Result<bool, SearchError> {
    if digest(query.question.as_bytes()) != trace.header.question_digest {
        return Err(SearchError::Config("question does not match trace".into()));
    }
    let again = run_strategy(query, &trace.header.config, schema, generator, reward);
    Ok(again.trace == *trace)
}
