use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{grade, BenchmarkItem, Grader, HarnessError};
use crate::backends::{Generator, RewardModel};
use crate::keyed::{hash_str, key};
use crate::search::{run_strategy, BudgetLedger, Query, SearchConfig, Strategy};
use crate::stages::TagSchema;

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Items searched at once.
    pub parallelism: usize,
    pub grader: Grader,
    /// Where the run log and traces go; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
    pub write_traces: bool,
    /// Record wall time. Off makes every output byte-reproducible.
    pub timing: bool,
    /// Sweep coordinate stored in each record.
    pub param: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            parallelism: 1,
            grader: Grader::Local,
            output_dir: None,
            write_traces: false,
            timing: true,
            param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub item_id: String,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<u64>,
    pub seed: u64,
    pub conclusion: Option<String>,
    pub correct: bool,
    pub ungradable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub ledger: BudgetLedger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSummary {
    pub items: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub ledger: BudgetLedger,
    /// In input order.
    pub records: Vec<RunRecord>,
}

impl BenchmarkSummary {
    /// Standard error of the accuracy estimate.
    pub fn std_error(&self) -> f64 {
        let p = self.accuracy;
        (p * (1.0 - p) / self.items as f64).sqrt()
    }
}

/// Seed for one item, independent of its position and of scheduling.
pub fn item_seed(run_seed: u64, item_id: &str) -> u64 {
    key(&[run_seed, hash_str(item_id)])
}

fn trace_name(index: usize, id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(48)
        .collect();
    format!("{index:06}-{clean}.jsonl")
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    index: usize,
    item: &BenchmarkItem,
    cfg: &SearchConfig,
    schema: &TagSchema,
    generator: &dyn Generator,
    reward: &dyn RewardModel,
    opts: &RunOptions,
    trace_dir: Option<&Path>,
) -> Result<RunRecord, HarnessError> {
    let seed = item_seed(cfg.seed, &item.id);
    let item_cfg = SearchConfig {
        seed,
        ..cfg.clone()
    };
    let query = Query {
        question: item.prompt(),
        image_ref: item.image_ref.clone(),
    };
    let mut report = run_strategy(&query, &item_cfg, schema, generator, reward);
    if !opts.timing {
        report.ledger.wall_time_secs = 0.0;
    }
    let trace = match trace_dir {
        Some(dir) => {
            let name = trace_name(index, &item.id);
            report.trace.write_jsonl(BufWriter::new(File::create(dir.join(&name))?))?;
            Some(format!("traces/{name}"))
        }
        None => None,
    };
    let (conclusion, grade, error) = match &report.outcome {
        Ok(answer) => {
            let text = answer.response.conclusion().unwrap_or_default().to_string();
            let g = grade(item, &text, opts.grader);
            (Some(text), g, None)
        }
        Err(e) => {
            tracing::warn!(item = %item.id, error = %e, "item failed");
            (None, super::Grade { correct: false, ungradable: false }, Some(e.to_string()))
        }
    };
    Ok(RunRecord {
        item_id: item.id.clone(),
        strategy: cfg.strategy,
        param: opts.param,
        seed,
        conclusion,
        correct: grade.correct,
        ungradable: grade.ungradable,
        error,
        ledger: report.ledger,
        trace,
    })
}

/// Runs every item with `cfg`, writing `runs.jsonl` (and per-item traces)
/// under the output directory when one is set. Per-item search failures are
/// recorded and graded incorrect; the run continues.
pub fn run_benchmark(
    items: &[BenchmarkItem],
    cfg: &SearchConfig,
    schema: &TagSchema,
    generator: &dyn Generator,
    reward: &dyn RewardModel,
    opts: &RunOptions,
) -> Result<BenchmarkSummary, HarnessError> {
    if items.is_empty() {
        return Err(HarnessError::EmptyBenchmark);
    }
    cfg.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    let trace_dir = match (&opts.output_dir, opts.write_traces) {
        (Some(dir), true) => {
            let d = dir.join("traces");
            fs::create_dir_all(&d)?;
            Some(d)
        }
        (Some(dir), false) => {
            fs::create_dir_all(dir)?;
            None
        }
        _ => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism.max(1))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let records: Vec<RunRecord> = pool.install(|| {
        items
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                run_one(i, item, cfg, schema, generator, reward, opts, trace_dir.as_deref())
            })
            .collect::<Result<_, _>>()
    })?;

    let mut ledger = BudgetLedger::default();
    let mut correct = 0;
    for r in &records {
        ledger.absorb(&r.ledger);
        correct += r.correct as usize;
    }
    if let Some(dir) = &opts.output_dir {
        let mut out = BufWriter::new(File::create(dir.join("runs.jsonl"))?);
        for r in &records {
            serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    Ok(BenchmarkSummary {
        items: records.len(),
        correct,
        accuracy: correct as f64 / records.len() as f64,
        ledger,
        records,
    })
}
