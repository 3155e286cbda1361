//! Config file (TOML) and its merge with command-line flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use retrace_core::backends::http::EndpointConfig;
use retrace_core::backends::sim::SimWorldConfig;
use retrace_core::search::{LoopSemantics, SearchConfig, Strategy};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Sim,
    Http,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessPaths {
    pub items: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub categories: Vec<String>,
    pub corpus: Option<PathBuf>,
    pub sources: Option<PathBuf>,
    pub datagen_output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub backend: BackendKind,
    /// Benchmark items searched at once.
    pub parallelism: usize,
    pub search: SearchConfig,
    pub sim: SimWorldConfig,
    pub generator: Option<EndpointConfig>,
    pub reward: Option<EndpointConfig>,
    /// Datagen judge; falls back to the generator endpoint.
    pub judge: Option<EndpointConfig>,
    pub paths: HarnessPaths,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            backend: BackendKind::Sim,
            parallelism: 1,
            search: SearchConfig::default(),
            sim: SimWorldConfig::w1(),
            generator: None,
            reward: None,
            judge: None,
            paths: HarnessPaths::default(),
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.parallelism == 0 {
            return Err(CliError::Config("parallelism must be >= 1".into()));
        }
        self.search
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.sim
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        for ep in [&self.generator, &self.reward, &self.judge].into_iter().flatten() {
            ep.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonFlags {
    /// TOML config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Backend pair to use.
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Search strategy: best-of-n, beam or swires.
    #[arg(long, global = true)]
    pub strategy: Option<Strategy>,
    /// Candidates generated per stage.
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Candidates kept per stage (samples for best-of-n).
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Retrace budget.
    #[arg(long, global = true)]
    pub retraces: Option<usize>,
    /// Cutoff offset in reward standard deviations.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub z: Option<f64>,
    /// Calibrated reward mean.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub reward_mean: Option<f64>,
    /// Calibrated reward standard deviation.
    #[arg(long, global = true)]
    pub reward_std: Option<f64>,
    /// Reasoning candidates of a pass that must clear the cutoff.
    #[arg(long, global = true)]
    pub min_pass: Option<usize>,
    /// How the retrace budget counts passes: algorithm-one or main-text.
    #[arg(long, global = true)]
    pub loop_semantics: Option<LoopSemantics>,
    /// Run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Benchmark items searched at once.
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Backend calls issued at once within one search.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
}

impl CommonFlags {
    pub fn resolve(&self) -> Result<AppConfig, CliError> {
        let mut app = match &self.config {
            Some(p) => AppConfig::load(p)?,
            None => AppConfig::default(),
        };
        let s = &mut app.search;
        if let Some(v) = self.strategy {
            s.strategy = v;
        }
        if let Some(v) = self.m {
            s.m = v;
        }
        if let Some(v) = self.n {
            s.n = v;
        }
        if let Some(v) = self.retraces {
            s.retraces = v;
        }
        if let Some(v) = self.z {
            s.z = v;
        }
        if let Some(v) = self.reward_mean {
            s.stats.reward_mean = v;
        }
        if let Some(v) = self.reward_std {
            s.stats.reward_std = v;
        }
        if let Some(v) = self.min_pass {
            s.min_pass_count = v;
        }
        if let Some(v) = self.loop_semantics {
            s.loop_semantics = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.concurrency {
            s.concurrency = v;
        }
        if let Some(v) = self.backend {
            app.backend = v;
        }
        if let Some(v) = self.parallelism {
            app.parallelism = v;
        }
        app.validate()?;
        Ok(app)
    }
}
