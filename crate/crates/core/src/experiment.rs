//! Experiment orchestration and the file outputs behind the CLI commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_config, DatasetSource, ExperimentConfig};
use crate::data::{gen_synthetic, generate, load_csv, split_train_test, Dataset, Standardizer, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fed::{Federation, RoundResult, ServerState};
use crate::nn::{init_model, ParameterVector};
use crate::pruning::{mask_report, PruningMode};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "OTAFL_THREADS";

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COMPARE_FILE: &str = "compare.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Rayon pool honoring `OTAFL_THREADS`; `None` when unset or invalid, in
/// which case the global pool is used.
pub fn configured_pool() -> Result<Option<rayon::ThreadPool>> {
    let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    else {
        return Ok(None);
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map(Some)
        .map_err(|e| Error::Domain(format!("cannot build thread pool: {e}")))
}

fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(match configured_pool()? {
        Some(pool) => pool.install(f),
        None => f(),
    })
}

/// Loads train/test data for a config, standardized with train statistics
/// when `federation.normalize` is set.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &config.dataset {
        DatasetSource::Synthetic(_) => {
            let spec = config.synthetic_spec()?.expect("synthetic source");
            gen_synthetic(&spec)?
        }
        DatasetSource::Csv(csv) => {
            let all = load_csv(&csv.path, csv.classes)?;
            match &csv.test_path {
                Some(test_path) => (all, load_csv(test_path, csv.classes)?),
                None => split_train_test(&all, config.seed)?,
            }
        }
    };
    if !config.federation.normalize {
        return Ok((train, test));
    }
    let stats = Standardizer::fit(&train)?;
    Ok((stats.apply(&train)?, stats.apply(&test)?))
}

/// Builds the federation and the initial server state.
pub fn prepare(config: &ExperimentConfig) -> Result<(Federation, ServerState)> {
    config.validate()?;
    let spec = config.model_spec()?;
    let (train, test) = load_datasets(config)?;
    if train.feature_dim() != spec.input_dim() || train.num_classes() != spec.num_classes() {
        return Err(Error::config(
            "model.layer_sizes",
            format!(
                "model maps {} features to {} classes but the dataset has {} features and {} classes",
                spec.input_dim(),
                spec.num_classes(),
                train.feature_dim(),
                train.num_classes()
            ),
        ));
    }
    if config.federation.clients > train.len() {
        return Err(Error::config(
            "federation.clients",
            format!("{} clients exceed {} training samples", config.federation.clients, train.len()),
        ));
    }
    let federation = Federation::new(
        spec.clone(),
        &train,
        test,
        config.policy()?,
        config.channel_config(),
        config.local_training(),
        config.seed,
    )?;
    let server = ServerState::new(init_model(&spec, config.seed), config.pruning_plan()?);
    Ok((federation, server))
}

/// Runs every round, handing each result to `on_round` as it completes.
/// Stops early once test accuracy reaches `federation.early_stop_accuracy`.
pub fn run_experiment_with<F>(config: &ExperimentConfig, mut on_round: F) -> Result<(ServerState, Vec<RoundResult>)>
where
    F: FnMut(&ServerState, &RoundResult) -> Result<()>,
{
    let (federation, mut server) = prepare(config)?;
    let mut results = Vec::with_capacity(config.federation.rounds);
    for _ in 0..config.federation.rounds {
        let (next, result) = federation.run_round(server)?;
        server = next;
        on_round(&server, &result)?;
        let stop = config
            .federation
            .early_stop_accuracy
            .is_some_and(|a| result.metrics.test_accuracy >= a);
        results.push(result);
        if stop {
            break;
        }
    }
    Ok((server, results))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RoundResult>> {
    run_experiment_with(config, |_, _| Ok(())).map(|(_, r)| r)
}

/// Little-endian `u64` length followed by the values as `f64`.
pub fn write_params(path: &Path, params: &ParameterVector) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 8 * params.len());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let n = bytes
        .get(..8)
        .map(|h| u64::from_le_bytes(h.try_into().unwrap()) as usize)
        .ok_or_else(|| bad("missing 8-byte length".into()))?;
    let body = &bytes[8..];
    if body.len() != 8 * n {
        return Err(bad(format!("length {n} needs {} bytes, found {}", 8 * n, body.len())));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes `round_NNNNN.params`, `.mask` and `.meta` under `dir`.
pub fn write_checkpoint(dir: &Path, server: &ServerState, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let stem = dir.join(format!("round_{:05}", server.round));
    write_params(&stem.with_extension("params"), &server.global_params)?;
    server.mask.save(&stem.with_extension("mask"))?;
    let report = mask_report(&server.mask);
    fs::write(
        stem.with_extension("meta"),
        format!(
            "round={}\nsparsity={}\nseed={}\n",
            server.round, report.sparsity, seed
        ),
    )?;
    Ok(stem)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub round_count: usize,
    pub final_accuracy: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub final_sparsity: f64,
    pub best_accuracy: Option<f64>,
    pub best_round: Option<usize>,
    pub total_params: u64,
    pub prunable_params: u64,
    pub size_bytes_dense: u64,
    pub size_bytes_sparse: u64,
    pub size_bytes_values: u64,
    pub seed: u64,
}

impl Summary {
    fn from_run(results: &[RoundResult], server: Option<&ServerState>, config: &ExperimentConfig) -> Self {
        let last = results.last().map(|r| &r.metrics);
        let best = results
            .iter()
            .map(|r| &r.metrics)
            .fold(None::<&crate::fed::MetricsRecord>, |best, m| match best {
                Some(b) if b.test_accuracy >= m.test_accuracy => Some(b),
                _ => Some(m),
            });
        let report = server.map(|s| mask_report(&s.mask));
        Summary {
            complete: true,
            error: None,
            round_count: results.len(),
            final_accuracy: last.map(|m| m.test_accuracy),
            final_test_loss: last.map(|m| m.test_loss),
            final_sparsity: last.map_or(0.0, |m| m.sparsity),
            best_accuracy: best.map(|m| m.test_accuracy),
            best_round: best.map(|m| m.round),
            total_params: report.map_or(0, |r| r.total_params),
            prunable_params: report.map_or(0, |r| r.prunable_params),
            size_bytes_dense: report.map_or(0, |r| r.size_bytes_dense),
            size_bytes_sparse: report.map_or(0, |r| r.size_bytes_sparse),
            size_bytes_values: report.map_or(0, |r| r.size_bytes_values),
            seed: config.seed,
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Runs one configured experiment, writing `metrics.csv`, `summary.json`
/// and periodic checkpoints into `out_dir`. If the run fails midway the
/// rows written so far are kept and the summary is marked incomplete.
pub fn run_to_dir(config: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    fs::create_dir_all(out_dir)?;
    let mut metrics = csv::Writer::from_path(out_dir.join(METRICS_FILE))?;
    // Header even when no rounds run.
    metrics.write_record([
        "round",
        "test_accuracy",
        "test_loss",
        "train_loss",
        "sparsity",
        "size_bytes_dense",
        "size_bytes_sparse",
        "participants_count",
    ])?;
    metrics.flush()?;
    let interval = config.output.checkpoint_interval;
    let checkpoint_dir = out_dir.join(CHECKPOINT_DIR);
    let mut seen = Vec::new();
    let outcome = with_pool(|| {
        run_experiment_with(config, |server, result| {
            let m = &result.metrics;
            metrics.write_record([
                m.round.to_string(),
                m.test_accuracy.to_string(),
                m.test_loss.to_string(),
                m.train_loss.to_string(),
                m.sparsity.to_string(),
                m.size_bytes_dense.to_string(),
                m.size_bytes_sparse.to_string(),
                m.participants_count.to_string(),
            ])?;
            metrics.flush()?;
            seen.push(result.clone());
            if interval > 0 && server.round % interval == 0 {
                write_checkpoint(&checkpoint_dir, server, config.seed)?;
            }
            Ok(())
        })
    })?;
    let summary_path = out_dir.join(SUMMARY_FILE);
    match outcome {
        Ok((server, results)) => {
            let summary = Summary::from_run(&results, Some(&server), config);
            write_json(&summary_path, &summary)?;
            Ok(summary)
        }
        Err(e) => {
            let mut summary = Summary::from_run(&seen, None, config);
            summary.complete = false;
            summary.error = Some(e.to_string());
            write_json(&summary_path, &summary)?;
            Err(e)
        }
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
    parse_config(&text)
}

/// `run` subcommand: parse the config file and run it into `out_dir`.
pub fn cmd_run(config_path: &Path, out_dir: &Path) -> Result<Summary> {
    run_to_dir(&read_config(config_path)?, out_dir)
}

/// Participation settings of the comparison matrix.
pub const PARTIAL_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareCell {
    pub mode: &'static str,
    pub target_sparsity: f64,
    pub participation: &'static str,
    pub fraction: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub final_sparsity: f64,
    pub size_bytes_sparse: u64,
}

fn mode_label(mode: PruningMode) -> &'static str {
    match mode {
        PruningMode::None => "none",
        PruningMode::OneShot => "osp",
        PruningMode::Iterative => "imp",
    }
}

/// Config for one comparison cell: the base config with the pruning mode,
/// target and participation fraction overridden. Seeds are untouched.
pub fn cell_config(base: &ExperimentConfig, mode: PruningMode, target: f64, fraction: f64) -> ExperimentConfig {
    let mut c = base.clone();
    c.pruning.mode = mode;
    c.pruning.target_sparsity = target;
    c.participation.fraction = fraction;
    c.output = Default::default();
    c
}

/// Runs {one-shot, iterative} x `sparsities` x {full, partial}
/// participation from one base config.
pub fn compare(base: &ExperimentConfig, sparsities: &[f64]) -> Result<Vec<CompareCell>> {
    let mut grid = Vec::new();
    for mode in [PruningMode::OneShot, PruningMode::Iterative] {
        for &target in sparsities {
            for (label, fraction) in [("full", 1.0), ("partial", PARTIAL_FRACTION)] {
                grid.push((mode, target, label, fraction));
            }
        }
    }
    // Validate every cell before running any of them.
    let configs = grid
        .iter()
        .map(|&(mode, target, _, fraction)| {
            let c = cell_config(base, mode, target, fraction);
            c.validate().map(|_| c)
        })
        .collect::<Result<Vec<_>>>()?;
    with_pool(|| {
        configs
            .par_iter()
            .zip(&grid)
            .map(|(config, &(mode, target, label, fraction))| {
                let (server, results) = run_experiment_with(config, |_, _| Ok(()))?;
                let last = results.last().map(|r| r.metrics);
                Ok(CompareCell {
                    mode: mode_label(mode),
                    target_sparsity: target,
                    participation: label,
                    fraction,
                    final_accuracy: last.map_or(0.0, |m| m.test_accuracy),
                    best_accuracy: results.iter().map(|r| r.metrics.test_accuracy).fold(0.0, f64::max),
                    final_sparsity: last.map_or(0.0, |m| m.sparsity),
                    size_bytes_sparse: mask_report(&server.mask).size_bytes_sparse,
                })
            })
            .collect()
    })?
}

pub fn format_compare_table(cells: &[CompareCell]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<5} {:>8} {:<8} {:>10} {:>10} {:>10} {:>12}",
        "mode", "target", "clients", "final_acc", "best_acc", "sparsity", "sparse_bytes"
    );
    for c in cells {
        let _ = writeln!(
            out,
            "{:<5} {:>8.2} {:<8} {:>10.4} {:>10.4} {:>10.4} {:>12}",
            c.mode, c.target_sparsity, c.participation, c.final_accuracy, c.best_accuracy, c.final_sparsity, c.size_bytes_sparse
        );
    }
    out
}

/// `compare` subcommand: writes `compare.csv` and returns the cells for
/// display.
pub fn cmd_compare(config_path: &Path, sparsities: &[f64], out_dir: &Path) -> Result<Vec<CompareCell>> {
    let base = read_config(config_path)?;
    if sparsities.is_empty() {
        return Err(Error::config("sparsities", "need at least one sparsity"));
    }
    let cells = compare(&base, sparsities)?;
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join(COMPARE_FILE))?;
    for cell in &cells {
        w.serialize(cell)?;
    }
    w.flush()?;
    Ok(cells)
}

/// `gen-data` subcommand: writes every generated sample (no split) as CSV.
pub fn cmd_gen_data(spec: &SyntheticSpec, out: &Path) -> Result<Dataset> {
    spec.validate()
        .map_err(|e| Error::config("gen-data", e.to_string()))?;
    let dataset = generate(spec)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    dataset.write_csv(out)?;
    Ok(dataset)
}
