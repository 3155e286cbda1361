//! Benchmark runner, grading and scaling sweeps.

mod grade;
mod items;
mod run;
mod scaling;

use thiserror::Error;

pub use grade::{grade, normalize_free_form, Grade, Grader};
pub use items::{
    filter_categories, read_items, sim_items, write_items, BenchmarkItem, ItemKind,
    REASONING_CATEGORIES,
};
pub use run::{item_seed, run_benchmark, BenchmarkSummary, RunOptions, RunRecord};
pub use scaling::{
    accuracy_within_budget, cell_config, default_grid, read_curve, scaling_experiment,
    write_curve, GridCell, ScalingPoint, CURVE_HEADER,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no benchmark items left to run")]
    EmptyBenchmark,
    #[error("empty scaling grid")]
    EmptyGrid,
    #[error("item {id:?}: {reason}")]
    InvalidItem { id: String, reason: String },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("configuration: {0}")]
    Config(String),
}
