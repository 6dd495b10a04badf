//! Multi-iteration runs with a JSONL metrics stream, periodic checkpoints
//! and resumption.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::{checkpoint_load, checkpoint_save};
use super::{run_iteration, IterationMetrics, OrchestratorError, RolloutExecutor, RunConfig, RunState};
use crate::domain::ProblemSet;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_PREFIX: &str = "checkpoint-";

pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join(format!("{CHECKPOINT_PREFIX}{iteration}.bin"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub state: RunState,
    pub metrics: Vec<IterationMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses a metrics JSONL stream, rejecting unknown or missing fields.
pub fn parse_metrics(text: &str, path: &str) -> Result<Vec<IterationMetrics>, OrchestratorError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| OrchestratorError::Metrics {
                path: path.to_string(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), OrchestratorError> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_error(path))?;
    tmp.write_all(bytes).map_err(io_error(path))?;
    tmp.persist(path).map_err(|e| io_error(path)(e.error))?;
    Ok(())
}

/// Runs `config.iterations` iterations in total, writing `metrics.jsonl`
/// and `checkpoint-{iter}.bin` files under `out_dir`.
///
/// With `resume`, the run continues from that checkpoint; metrics records
/// past the checkpoint's iteration are discarded first so the stream stays
/// one record per completed iteration.
pub fn run_experiment(
    config: &RunConfig,
    dataset: &ProblemSet,
    executor: &mut dyn RolloutExecutor,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<ExperimentSummary, OrchestratorError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;
    let hash = config.hash(&dataset.to_json());
    let metrics_path = out_dir.join(METRICS_FILE);

    // Earlier records are kept byte for byte; re-serializing parsed floats
    // is not guaranteed to reproduce them.
    let (mut state, mut metrics, stream) = match resume {
        Some(path) => {
            let state = checkpoint_load(path, &hash)?;
            let text = fs::read_to_string(&metrics_path).map_err(io_error(&metrics_path))?;
            let mut kept = parse_metrics(&text, &metrics_path.display().to_string())?;
            if (kept.len() as u64) < state.iteration {
                return Err(OrchestratorError::Metrics {
                    path: metrics_path.display().to_string(),
                    message: format!(
                        "holds {} records but the checkpoint is at iteration {}",
                        kept.len(),
                        state.iteration
                    ),
                });
            }
            kept.truncate(state.iteration as usize);
            let mut stream = String::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()).take(kept.len()) {
                stream.push_str(line);
                stream.push('\n');
            }
            (state, kept, stream)
        }
        None => (RunState::new(config), Vec::new(), String::new()),
    };
    write_atomic(&metrics_path, stream.as_bytes())?;

    let mut file: File = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(io_error(&metrics_path))?;
    let mut checkpoints = Vec::new();
    while state.iteration < config.iterations {
        let report = match run_iteration(&mut state, config, dataset, executor) {
            Ok(r) => r,
            Err(e) => {
                let path = checkpoint_path(out_dir, state.iteration);
                checkpoint_save(&state, &hash, &path)?;
                return Err(e);
            }
        };
        let mut line = serde_json::to_string(&report.metrics).expect("metrics serialize");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(io_error(&metrics_path))?;
        file.flush().map_err(io_error(&metrics_path))?;
        metrics.push(report.metrics);
        let every = config.checkpoint_every;
        if every > 0 && state.iteration % every == 0 && state.iteration < config.iterations {
            let path = checkpoint_path(out_dir, state.iteration);
            checkpoint_save(&state, &hash, &path)?;
            checkpoints.push(path);
        }
    }
    let path = checkpoint_path(out_dir, state.iteration);
    checkpoint_save(&state, &hash, &path)?;
    checkpoints.push(path);
    Ok(ExperimentSummary {
        state,
        metrics,
        checkpoints,
    })
}
