use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_benchmark, BenchmarkItem, HarnessError, RunOptions};
use crate::backends::{Generator, RewardModel};
use crate::search::{LoopSemantics, SearchConfig, Strategy};
use crate::stages::TagSchema;

pub const CURVE_HEADER: &str = "strategy,param,calls,reward_calls,wall_time_s,accuracy";

/// One sweep point: a strategy and the value of its scaling knob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub strategy: Strategy,
    /// Samples for best-of-N, candidates per stage for beam, retraces for SWIRES.
    pub param: u64,
}

impl GridCell {
    pub fn new(strategy: Strategy, param: u64) -> Self {
        GridCell { strategy, param }
    }
}

pub fn default_grid() -> Vec<GridCell> {
    let mut grid = Vec::new();
    grid.extend([1, 3, 4, 8].map(|n| GridCell::new(Strategy::BestOfN, n)));
    grid.extend([1, 4, 6, 19].map(|m| GridCell::new(Strategy::StageBeam, m)));
    grid.extend([0, 1, 3].map(|c| GridCell::new(Strategy::Swires, c)));
    grid
}

/// Search config for one grid cell. Beam keeps two survivors when the
/// candidate count is even and one otherwise; SWIRES counts the knob as
/// retraces after the first pass.
pub fn cell_config(base: &SearchConfig, cell: GridCell) -> SearchConfig {
    let p = cell.param as usize;
    let mut cfg = base.clone().with_strategy(cell.strategy);
    match cell.strategy {
        Strategy::BestOfN => cfg.n = p,
        Strategy::StageBeam => {
            cfg.m = p;
            cfg.n = if p.is_multiple_of(2) { 2 } else { 1 };
        }
        Strategy::Swires => {
            cfg.retraces = p;
            cfg.loop_semantics = LoopSemantics::MainText;
        }
    }
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub strategy: Strategy,
    pub param: u64,
    /// Generator calls summed over all items.
    pub calls: u64,
    pub reward_calls: u64,
    pub wall_time_s: f64,
    pub accuracy: f64,
    #[serde(skip)]
    pub items: usize,
    /// Per-item correctness in input order; not part of the table.
    #[serde(skip)]
    pub outcomes: Vec<bool>,
}

impl ScalingPoint {
    pub fn calls_per_item(&self) -> f64 {
        self.calls as f64 / self.items.max(1) as f64
    }
}

/// Runs every grid cell over the same items. With an output directory each
/// cell's run log lands in `<dir>/<strategy>-<param>/`.
pub fn scaling_experiment(
    items: &[BenchmarkItem],
    base: &SearchConfig,
    grid: &[GridCell],
    schema: &TagSchema,
    generator: &dyn Generator,
    reward: &dyn RewardModel,
    opts: &RunOptions,
) -> Result<Vec<ScalingPoint>, HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::EmptyGrid);
    }
    let mut points = Vec::with_capacity(grid.len());
    for &cell in grid {
        let cfg = cell_config(base, cell);
        let cell_opts = RunOptions {
            output_dir: opts.output_dir.as_ref().map(|d| {
                d.join(format!("{}-{}", cfg.strategy.as_str(), cell.param))
            }),
            param: Some(cell.param),
            ..opts.clone()
        };
        let summary = run_benchmark(items, &cfg, schema, generator, reward, &cell_opts)?;
        tracing::info!(
            strategy = cfg.strategy.as_str(),
            param = cell.param,
            accuracy = summary.accuracy,
            "grid cell done"
        );
        points.push(ScalingPoint {
            strategy: cell.strategy,
            param: cell.param,
            calls: summary.ledger.generator_calls,
            reward_calls: summary.ledger.reward_calls,
            wall_time_s: summary.ledger.wall_time_secs,
            accuracy: summary.accuracy,
            items: summary.items,
            outcomes: summary.records.iter().map(|r| r.correct).collect(),
        });
    }
    Ok(points)
}

pub fn write_curve(path: &Path, points: &[ScalingPoint]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    if points.is_empty() {
        w.write_record(CURVE_HEADER.split(','))?;
    }
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<ScalingPoint>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// The most accurate point of `strategy` whose total generator calls fit in `budget`.
pub fn accuracy_within_budget(
    points: &[ScalingPoint],
    strategy: Strategy,
    budget: u64,
) -> Option<&ScalingPoint> {
    points
        .iter()
        .filter(|p| p.strategy == strategy && p.calls <= budget)
        .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(b.calls.cmp(&a.calls)))
}
