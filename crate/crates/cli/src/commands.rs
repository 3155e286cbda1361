use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::json;

use retrace_core::backends::http::{EndpointConfig, HttpGenerator, HttpReward};
use retrace_core::backends::sim::SimWorld;
use retrace_core::backends::{ChatModel, Generator, RewardModel};
use retrace_core::datagen::{read_sources, run_pipeline, RecordStatus};
use retrace_core::harness::{
    default_grid, filter_categories, read_items, run_benchmark, scaling_experiment, sim_items,
    write_curve, BenchmarkItem, GridCell, Grader, RunOptions, REASONING_CATEGORIES,
};
use retrace_core::keyed::key;
use retrace_core::oracle::{check_cases, exact_accuracy};
use retrace_core::search::{
    backtrack_cutoff, rollout, run_strategy, score_reasoning, summarize, CalibrationItem, Query,
    Strategy,
};
use retrace_core::stages::{render_staged, StageKind, StagedResponse, TagSchema};

use crate::config::{AppConfig, BackendKind};
use crate::{CliError, ItemSource};

/// Machine-readable result; always the last line on stdout.
fn summary(value: serde_json::Value) {
    println!("{value}");
}

fn endpoint<'a>(ep: &'a Option<EndpointConfig>, name: &str) -> Result<&'a EndpointConfig, CliError> {
    ep.as_ref()
        .ok_or_else(|| CliError::Config(format!("http backend needs a [{name}] section")))
}

type SearchPair = (Box<dyn Generator>, Box<dyn RewardModel>);
type ChatPair = (Box<dyn ChatModel>, Box<dyn ChatModel>);

fn search_backends(app: &AppConfig) -> Result<SearchPair, CliError> {
    Ok(match app.backend {
        BackendKind::Sim => {
            let world = SimWorld::new(app.sim.clone())?;
            (Box::new(world.clone()), Box::new(world))
        }
        BackendKind::Http => (
            Box::new(HttpGenerator::new(endpoint(&app.generator, "generator")?.clone())?),
            Box::new(HttpReward::new(endpoint(&app.reward, "reward")?.clone())?),
        ),
    })
}

fn chat_backends(app: &AppConfig) -> Result<ChatPair, CliError> {
    Ok(match app.backend {
        BackendKind::Sim => {
            let world = SimWorld::new(app.sim.clone())?;
            (Box::new(world.clone()), Box::new(world))
        }
        BackendKind::Http => {
            let gen = endpoint(&app.generator, "generator")?.clone();
            let judge = app.judge.clone().unwrap_or_else(|| gen.clone());
            (
                Box::new(HttpGenerator::new(gen)?),
                Box::new(HttpGenerator::new(judge)?),
            )
        }
    })
}

pub fn solve(
    app: &AppConfig,
    question: &str,
    image: Option<String>,
    trace_path: Option<&Path>,
) -> Result<(), CliError> {
    let schema = TagSchema::default();
    let (gen, rew) = search_backends(app)?;
    let query = Query {
        question: question.to_string(),
        image_ref: image,
    };
    let report = run_strategy(&query, &app.search, &schema, gen.as_ref(), rew.as_ref());
    if let Some(path) = trace_path {
        report.trace.write_jsonl(BufWriter::new(File::create(path)?))?;
    }
    let ledger = &report.ledger;
    match report.outcome {
        Ok(answer) => {
            println!("{}", render_staged(&answer.response, &schema));
            let conclusion = answer.response.conclusion().unwrap_or_default();
            println!("conclusion: {conclusion}");
            summary(json!({
                "command": "solve",
                "ok": true,
                "strategy": app.search.strategy,
                "conclusion": conclusion,
                "score": answer.score,
                "generator_calls": ledger.generator_calls,
                "reward_calls": ledger.reward_calls,
                "wall_time_s": ledger.wall_time_secs,
            }));
            Ok(())
        }
        Err(e) => {
            summary(json!({
                "command": "solve",
                "ok": false,
                "error": e.to_string(),
                "generator_calls": ledger.generator_calls,
                "reward_calls": ledger.reward_calls,
            }));
            Err(e.into())
        }
    }
}

fn load_items(app: &AppConfig, src: &ItemSource) -> Result<Vec<BenchmarkItem>, CliError> {
    let items = match (src.sim_items, src.items.as_ref().or(app.paths.items.as_ref())) {
        (Some(n), _) => sim_items(n),
        (None, Some(path)) => read_items(path)?,
        (None, None) => {
            return Err(CliError::Config("give --items PATH or --sim-items N".into()))
        }
    };
    let mut keep: Vec<&str> = if src.categories.is_empty() {
        app.paths.categories.iter().map(String::as_str).collect()
    } else {
        src.categories.iter().map(String::as_str).collect()
    };
    if src.reasoning_subset {
        keep.extend(REASONING_CATEGORIES);
    }
    Ok(if keep.is_empty() {
        items
    } else {
        filter_categories(&items, &keep)
    })
}

fn run_options(app: &AppConfig, src: &ItemSource) -> RunOptions {
    RunOptions {
        parallelism: app.parallelism,
        grader: match app.backend {
            BackendKind::Sim => Grader::HiddenFlag,
            BackendKind::Http => Grader::Local,
        },
        output_dir: src.out.clone().or_else(|| app.paths.output_dir.clone()),
        write_traces: src.traces,
        timing: !src.no_timing,
        param: None,
    }
}

pub fn bench(app: &AppConfig, src: &ItemSource) -> Result<(), CliError> {
    let items = load_items(app, src)?;
    let (gen, rew) = search_backends(app)?;
    let opts = run_options(app, src);
    let s = run_benchmark(&items, &app.search, &TagSchema::default(), gen.as_ref(), rew.as_ref(), &opts)?;
    let failed = s.records.iter().filter(|r| r.error.is_some()).count();
    let ungradable = s.records.iter().filter(|r| r.ungradable).count();
    println!(
        "{}: {}/{} correct ({:.4} +/- {:.4})",
        app.search.strategy.as_str(),
        s.correct,
        s.items,
        s.accuracy,
        s.std_error()
    );
    summary(json!({
        "command": "bench",
        "strategy": app.search.strategy,
        "items": s.items,
        "correct": s.correct,
        "accuracy": s.accuracy,
        "std_error": s.std_error(),
        "failed": failed,
        "ungradable": ungradable,
        "generator_calls": s.ledger.generator_calls,
        "reward_calls": s.ledger.reward_calls,
    }));
    Ok(())
}

fn parse_cell(spec: &str) -> Result<GridCell, CliError> {
    let (s, p) = spec
        .split_once(':')
        .ok_or_else(|| CliError::Config(format!("grid cell {spec:?} is not STRATEGY:PARAM")))?;
    let strategy: Strategy = s.parse()?;
    let param = p
        .parse()
        .map_err(|_| CliError::Config(format!("grid cell {spec:?}: bad parameter")))?;
    Ok(GridCell::new(strategy, param))
}

pub fn scale(
    app: &AppConfig,
    src: &ItemSource,
    curve: Option<PathBuf>,
    cells: &[String],
) -> Result<(), CliError> {
    let items = load_items(app, src)?;
    let grid = if cells.is_empty() {
        default_grid()
    } else {
        cells.iter().map(|c| parse_cell(c)).collect::<Result<_, _>>()?
    };
    let (gen, rew) = search_backends(app)?;
    let opts = run_options(app, src);
    let curve = curve.unwrap_or_else(|| match &opts.output_dir {
        Some(d) => d.join("curve.csv"),
        None => PathBuf::from("curve.csv"),
    });
    let points = scaling_experiment(
        &items,
        &app.search,
        &grid,
        &TagSchema::default(),
        gen.as_ref(),
        rew.as_ref(),
        &opts,
    )?;
    if let Some(parent) = curve.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_curve(&curve, &points)?;
    for p in &points {
        println!(
            "{:<11} {:>3}  calls/item {:>6.2}  accuracy {:.4}",
            p.strategy.as_str(),
            p.param,
            p.calls_per_item(),
            p.accuracy
        );
    }
    summary(json!({
        "command": "scale",
        "items": items.len(),
        "points": points.len(),
        "curve": curve.display().to_string(),
    }));
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusLine {
    question: String,
    #[serde(default)]
    image_ref: Option<String>,
    #[serde(default)]
    trajectory: Option<StagedResponse>,
    /// A precomputed reasoning-stage reward; no reward call is made.
    #[serde(default)]
    score: Option<f64>,
}

pub fn calibrate(
    app: &AppConfig,
    corpus: Option<PathBuf>,
    rollouts: Option<usize>,
    write: Option<&Path>,
) -> Result<(), CliError> {
    let schema = TagSchema::default();
    let (gen, rew) = search_backends(app)?;
    let mut scores = Vec::new();
    if let Some(n) = rollouts {
        for i in 0..n {
            let question = format!("Calibration question {i}");
            let seed = key(&[app.search.seed, i as u64]);
            let trajectory = rollout(gen.as_ref(), &question, None, StageKind::Reasoning, seed, &schema)?;
            let item = CalibrationItem {
                question,
                image_ref: None,
                trajectory,
            };
            scores.push(score_reasoning(rew.as_ref(), &item)?);
        }
    } else {
        let path = corpus
            .or_else(|| app.paths.corpus.clone())
            .ok_or_else(|| CliError::Config("give --corpus PATH or --rollouts N".into()))?;
        let reader = BufReader::new(File::open(&path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CorpusLine = serde_json::from_str(&line)
                .map_err(|e| CliError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
            let score = match (parsed.score, parsed.trajectory) {
                (Some(s), _) => s,
                (None, Some(trajectory)) => score_reasoning(
                    rew.as_ref(),
                    &CalibrationItem {
                        question: parsed.question,
                        image_ref: parsed.image_ref,
                        trajectory,
                    },
                )?,
                (None, None) => {
                    return Err(CliError::Config(format!(
                        "{} line {}: needs a trajectory or a score",
                        path.display(),
                        i + 1
                    )))
                }
            };
            scores.push(score);
        }
    }
    let stats = summarize(&scores)?;
    if let Some(path) = write {
        let text = serde_json::to_string_pretty(&stats).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
    }
    println!(
        "reward mean {:.6}, std {:.6} over {} samples",
        stats.reward_mean, stats.reward_std, stats.sample_count
    );
    summary(json!({
        "command": "calibrate",
        "reward_mean": stats.reward_mean,
        "reward_std": stats.reward_std,
        "sample_count": stats.sample_count,
        "z": app.search.z,
        "cutoff": backtrack_cutoff(&stats, app.search.z),
    }));
    Ok(())
}

pub fn datagen(app: &AppConfig, sources: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    let sources = sources
        .or_else(|| app.paths.sources.clone())
        .ok_or_else(|| CliError::Config("give --sources PATH".into()))?;
    let out = out
        .or_else(|| app.paths.datagen_output.clone())
        .ok_or_else(|| CliError::Config("give --out PATH".into()))?;
    let records = read_sources(&sources)?;
    let (gen, judge) = chat_backends(app)?;
    let s = run_pipeline(&records, gen.as_ref(), judge.as_ref(), &TagSchema::default(), &out)?;
    println!(
        "valid {}, judged invalid {}, format invalid {}, retryable {} ({} resumed)",
        s.count(RecordStatus::Valid),
        s.count(RecordStatus::JudgedInvalid),
        s.count(RecordStatus::FormatInvalid),
        s.count(RecordStatus::Retryable),
        s.resumed
    );
    summary(json!({
        "command": "datagen",
        "valid": s.count(RecordStatus::Valid),
        "judged_invalid": s.count(RecordStatus::JudgedInvalid),
        "format_invalid": s.count(RecordStatus::FormatInvalid),
        "retryable": s.count(RecordStatus::Retryable),
        "resumed": s.resumed,
        "generator_calls": s.generator_calls,
        "judge_calls": s.judge_calls,
        "output": out.display().to_string(),
    }));
    Ok(())
}

pub fn simcheck(app: &AppConfig, trials: usize) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Config("--trials must be >= 1".into()));
    }
    let items = sim_items(trials);
    let schema = TagSchema::default();
    let opts = RunOptions {
        parallelism: app.parallelism,
        grader: Grader::HiddenFlag,
        timing: false,
        ..RunOptions::default()
    };
    let mut failed = 0;
    let cases = check_cases();
    for case in &cases {
        let exact = exact_accuracy(&case.world, &case.search)
            .map_err(|e| CliError::Other(format!("{}: {e}", case.name)))?;
        let world = SimWorld::new(case.world.clone())?;
        let search = retrace_core::search::SearchConfig {
            seed: app.search.seed,
            ..case.search.clone()
        };
        let mc = run_benchmark(&items, &search, &schema, &world, &world, &opts)?;
        let p = exact.accuracy;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        let delta = mc.accuracy - p;
        let closed_ok = case.closed_form.is_none_or(|cf| (cf - p).abs() < 1e-12);
        let ok = closed_ok && delta.abs() <= 3.0 * se;
        failed += !ok as usize;
        println!(
            "{} {:<28} exact {:.6}  sampled {:.6}  delta {:+.6}  se {:.6}",
            if ok { "ok  " } else { "FAIL" },
            case.name,
            p,
            mc.accuracy,
            delta,
            se
        );
    }
    summary(json!({
        "command": "simcheck",
        "cases": cases.len(),
        "failed": failed,
        "trials": trials,
    }));
    if failed > 0 {
        return Err(CliError::Other(format!("{failed} case(s) outside 3 standard errors")));
    }
    Ok(())
}
