use std::fmt;
use std::fs;
use std::io::Write;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;
use sgs_core::domain::{brute_force, generate_dataset, DatasetConfig, Problem, ProblemSet};
use sgs_core::fabric::DrainOptions;
use sgs_core::orchestrator::{
    new_param_store, parse_metrics, run_experiment, DatasetRef, ExperimentSummary, FabricExecutor, InProcessExecutor,
    IterationMetrics, RolloutExecutor, RunConfig, METRICS_FILE,
};
use sgs_core::scaling::{
    curve_from_metrics, fit, robustness_subsample, robustness_truncate, FitReport, Robustness, DEFAULT_TRUNCATIONS,
};
use sgs_net::{run_worker, serve, NetError, ServerState, WorkerClient, WorkerOptions};

use crate::{Command, FitArgs, RunArgs};

pub const DATASET_FILE: &str = "dataset.json";
pub const FIT_FILE: &str = "fit.json";
pub const REPORT_FILE: &str = "report.csv";
const SUBSAMPLE_RUNS: usize = 100;
const SUBSAMPLE_KEEP: f64 = 0.5;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, missing or invalid config.
    Usage(String),
    /// The command ran and failed.
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Domain(m) => f.write_str(m),
        }
    }
}

fn domain(e: impl fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenDataset { config, seed, out } => gen_dataset(config.as_deref(), seed, &out),
        Command::Run { run } => {
            let (config, set) = load_run(&run)?;
            let summary = run_experiment(&config, &set, &mut InProcessExecutor, &run.out, run.resume.as_deref())
                .map_err(domain)?;
            print_summary(&summary, &run.out);
            Ok(())
        }
        Command::Serve {
            run,
            addr,
            timeout_secs,
        } => serve_run(&run, &addr, timeout_secs),
        Command::Work {
            addr,
            timeout_secs,
            worker_id,
            max_tasks,
        } => work(&addr, timeout_secs, worker_id, max_tasks),
        Command::Fit {
            metrics,
            robustness,
            fit,
            out,
        } => fit_command(&metrics, robustness, &fit, &out),
        Command::Oracle { problem } => oracle(&problem),
        Command::Report {
            metrics,
            asymptotes,
            fit,
            out,
        } => report(&metrics, asymptotes, &fit, &out),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| domain(format!("{}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| domain(format!("{}: {e}", dir.display())))?;
    tmp.write_all(bytes)
        .map_err(|e| domain(format!("{}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| domain(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| domain(format!("{}: {e}", path.display())))
}

fn read_config(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn gen_dataset(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut data = match config {
        None => DatasetConfig::default(),
        Some(path) => {
            let text = read_config(path)?;
            let value: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            if value.get("dataset").is_some() {
                match RunConfig::from_value(value)
                    .map_err(|e| CliError::Usage(e.to_string()))?
                    .dataset
                {
                    DatasetRef::Generate(d) => d,
                    DatasetRef::Path(_) => {
                        return Err(CliError::Usage(
                            "run config names a dataset file, not generator settings".into(),
                        ))
                    }
                }
            } else {
                serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
            }
        }
    };
    if let Some(seed) = seed {
        data.seed = seed;
    }
    let set = generate_dataset(&data).map_err(domain)?;
    let path = out.join(DATASET_FILE);
    write_atomic(&path, set.to_json().as_bytes())?;
    println!(
        "{} problems ({:.1}% infeasible) -> {}",
        set.len(),
        100.0 * set.infeasible_fraction,
        path.display()
    );
    Ok(())
}

fn load_run(args: &RunArgs) -> Result<(RunConfig, ProblemSet), CliError> {
    let text = read_config(&args.config)?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: not valid JSON: {e}", args.config.display())))?;
    if let Some(obj) = value.as_object_mut() {
        if let Some(mode) = &args.mode {
            obj.insert("mode".into(), Value::String(mode.clone()));
        }
        if let Some(seed) = args.seed {
            obj.insert("seed".into(), Value::from(seed));
        }
    }
    let config =
        RunConfig::from_value(value).map_err(|e| CliError::Usage(format!("config {}: {e}", args.config.display())))?;
    let set = match &config.dataset {
        DatasetRef::Generate(d) => generate_dataset(d).map_err(domain)?,
        DatasetRef::Path(p) => {
            let base = args.config.parent().unwrap_or(Path::new("."));
            let path = base.join(p);
            ProblemSet::from_json(&read(&path)?).map_err(|e| domain(format!("{}: {e}", path.display())))?
        }
    };
    tracing::info!(
        mode = config.mode.name(),
        seed = config.seed,
        problems = set.len(),
        "loaded run"
    );
    Ok((config, set))
}

fn print_summary(summary: &ExperimentSummary, out: &Path) {
    match summary.metrics.last() {
        Some(m) => println!(
            "iteration {}: cum_solve_rate {:.4}, generations {} -> {}",
            m.iter,
            m.cum_solve_rate,
            m.generations,
            out.join(METRICS_FILE).display()
        ),
        None => println!("nothing to run -> {}", out.display()),
    }
}

fn resolve(addr: &str) -> Result<SocketAddr, CliError> {
    addr.to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| CliError::Usage(format!("cannot resolve address {addr:?}")))
}

fn serve_run(args: &RunArgs, addr: &str, timeout_secs: u64) -> Result<(), CliError> {
    let (config, set) = load_run(args)?;
    let addr = resolve(addr)?;
    let fabric = Arc::new(FabricExecutor::pipeline_fabric(Duration::from_secs(timeout_secs)));
    let state = ServerState {
        fabric: fabric.clone(),
        params: new_param_store(),
    };
    let server = serve(addr, state.clone()).map_err(|e| domain(format!("bind {addr}: {e}")))?;
    println!("listening on {}", server.addr());
    let _ = std::io::stdout().flush();
    let drain = DrainOptions {
        stall_timeout: None,
        ..DrainOptions::default()
    };
    let mut executor: Box<dyn RolloutExecutor> = Box::new(FabricExecutor::new(fabric, Vec::new(), drain, state.params));
    let result = run_experiment(&config, &set, executor.as_mut(), &args.out, args.resume.as_deref());
    server.shutdown().map_err(domain)?;
    let summary = result.map_err(domain)?;
    print_summary(&summary, &args.out);
    Ok(())
}

fn work(
    addr: &str,
    timeout_secs: Option<u64>,
    worker_id: Option<String>,
    max_tasks: Option<usize>,
) -> Result<(), CliError> {
    let id = worker_id.unwrap_or_else(|| format!("worker-{}", std::process::id()));
    let client = WorkerClient::new(addr, &id, Duration::from_secs(30)).map_err(domain)?;
    client
        .heartbeat()
        .map_err(|e| domain(format!("cannot reach {addr}: {e}")))?;
    let options = WorkerOptions {
        idle_limit: timeout_secs.map(Duration::from_secs),
        max_tasks,
        ..WorkerOptions::default()
    };
    match run_worker(&client, &options) {
        Ok(s) => {
            println!("{id}: {} accepted, {} duplicate", s.accepted, s.duplicates);
            Ok(())
        }
        Err(NetError::Http(e)) if e.is_connect() => {
            tracing::info!("server closed the connection; exiting");
            Ok(())
        }
        Err(e) => Err(domain(e)),
    }
}

fn fit_report(text: &str, args: &FitArgs, robustness: bool) -> Result<FitReport, CliError> {
    let points = curve_from_metrics(text).map_err(domain)?;
    let base = fit(&points, args.c_min, args.recenter).map_err(domain)?;
    let robustness = if robustness {
        Some(Robustness {
            truncation: robustness_truncate(&points, &DEFAULT_TRUNCATIONS, args.c_min, args.recenter)
                .map_err(domain)?,
            subsample: robustness_subsample(&points, SUBSAMPLE_RUNS, SUBSAMPLE_KEEP, 0, args.c_min, args.recenter)
                .map_err(domain)?,
        })
    } else {
        None
    };
    Ok(FitReport {
        fit: base,
        c_min: args.c_min,
        recenter: args.recenter,
        robustness,
    })
}

fn fit_command(metrics: &[PathBuf], robustness: bool, args: &FitArgs, out: &Path) -> Result<(), CliError> {
    let [path] = metrics else {
        return Err(CliError::Usage("fit takes exactly one --metrics file".into()));
    };
    let report = fit_report(&read(path)?, args, robustness).map_err(|e| domain(format!("{}: {e}", path.display())))?;
    let json = serde_json::to_string_pretty(&report).expect("fit reports serialize");
    let target = out.join(FIT_FILE);
    write_atomic(&target, json.as_bytes())?;
    let f = &report.fit;
    println!(
        "R0 {:.4}  A {:.4}  C_mid {:.1}  B {:.3}  sse {:.3e}{} -> {}",
        f.r0,
        f.asymptote,
        f.c_mid,
        f.steepness,
        f.sse,
        if f.degenerate { "  (degenerate)" } else { "" },
        target.display()
    );
    Ok(())
}

fn oracle(problem: &str) -> Result<(), CliError> {
    let mut value: Value =
        serde_json::from_str(problem).map_err(|e| CliError::Usage(format!("--problem is not JSON: {e}")))?;
    if let Some(obj) = value.as_object_mut() {
        obj.entry("id").or_insert_with(|| Value::String("cli".into()));
    }
    let problem: Problem = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("--problem: {e}")))?;
    problem
        .validate()
        .map_err(|e| CliError::Usage(format!("--problem: {e}")))?;
    let report = brute_force(&problem).map_err(domain)?;
    println!("{}", serde_json::to_string(&report).expect("reports serialize"));
    Ok(())
}

struct Run {
    label: String,
    records: Vec<IterationMetrics>,
    asymptote: Option<f64>,
}

fn label_for(path: &Path) -> String {
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    if file == METRICS_FILE {
        if let Some(dir) = path.parent().and_then(|d| d.file_name()) {
            return dir.to_string_lossy().into_owned();
        }
    }
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Cumulative solve rate in effect at `c`: the last record at or below it,
/// blank outside the run's range.
fn rate_at(records: &[IterationMetrics], c: u64) -> Option<f64> {
    let last = records.last()?;
    if c > last.generations {
        return None;
    }
    let idx = records.partition_point(|m| m.generations <= c);
    idx.checked_sub(1).map(|i| records[i].cum_solve_rate)
}

fn report(metrics: &[PathBuf], asymptotes: bool, args: &FitArgs, out: &Path) -> Result<(), CliError> {
    let mut runs: Vec<Run> = Vec::new();
    for path in metrics {
        let text = read(path)?;
        let records = parse_metrics(&text, &path.display().to_string()).map_err(domain)?;
        if records.is_empty() {
            return Err(domain(format!("{}: no metrics records", path.display())));
        }
        let asymptote = if asymptotes {
            Some(
                fit_report(&text, args, false)
                    .map_err(|e| domain(format!("{}: {e}", path.display())))?
                    .fit
                    .asymptote,
            )
        } else {
            None
        };
        let mut label = label_for(path);
        if runs.iter().any(|r| r.label == label) {
            label = format!("{label}#{}", runs.len() + 1);
        }
        runs.push(Run {
            label,
            records,
            asymptote,
        });
    }

    let mut grid: Vec<u64> = runs
        .iter()
        .flat_map(|r| r.records.iter().map(|m| m.generations))
        .collect();
    grid.sort_unstable();
    grid.dedup();
    let mut csv = String::from("generations");
    for r in &runs {
        csv.push(',');
        csv.push_str(&r.label.replace(',', "_"));
    }
    csv.push('\n');
    for &c in &grid {
        csv.push_str(&c.to_string());
        for r in &runs {
            csv.push(',');
            if let Some(v) = rate_at(&r.records, c) {
                csv.push_str(&v.to_string());
            }
        }
        csv.push('\n');
    }
    let target = out.join(REPORT_FILE);
    write_atomic(&target, csv.as_bytes())?;

    let width = runs.iter().map(|r| r.label.len()).max().unwrap_or(3).max(3);
    print!(
        "{:width$}  {:>6}  {:>12}  {:>9}",
        "run", "iters", "generations", "cum_rate"
    );
    println!("{}", if asymptotes { "  asymptote" } else { "" });
    for r in &runs {
        let last = r.records.last().expect("nonempty");
        print!(
            "{:width$}  {:>6}  {:>12}  {:>9.4}",
            r.label,
            r.records.len(),
            last.generations,
            last.cum_solve_rate
        );
        match r.asymptote {
            Some(a) => println!("  {a:>9.4}"),
            None => println!(),
        }
    }
    println!("-> {}", target.display());
    Ok(())
}
