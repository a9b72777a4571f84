//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use autorank::analysis::{median, quantile, sphere_ratio_experiment, SphereExperiment, SphereSummary};
use autorank::train::train;
use autorank::{Error as CoreError, Mode, TrainRecord};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::plot;
use crate::report::{self, RunMetrics};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.json";
pub const THEORY_FILE: &str = "theory.csv";
pub const THEORY_SUMMARY_FILE: &str = "theory_summary.json";
pub const RUNS_DIR: &str = "runs";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("invalid arguments: {0}")]
    Usage(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0:#}")]
    Failed(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Diverged { .. } => CliError::Diverged(e.to_string()),
            CoreError::Config(m) => CliError::Usage(m),
            other => CliError::Failed(other.into()),
        }
    }
}

/// Where result files go and how the config is read.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub overrides: Vec<String>,
    pub output_root: Option<PathBuf>,
}

/// Trains once on the configured task.
pub fn execute(config: &RunConfig) -> Result<(TrainRecord, RunMetrics), CliError> {
    let task = config.task.build()?;
    let record = train(&task, &config.train)?;
    let metrics = RunMetrics::new(&task, &record, config.train.mode)?;
    Ok((record, metrics))
}

pub fn cmd_run(config_path: &Path, opts: &RunOptions) -> Result<(PathBuf, RunMetrics), CliError> {
    let config = RunConfig::load(config_path, &opts.overrides)?;
    let dir = config.resolved_output(opts.output_root.as_deref());
    let (record, metrics) = execute(&config)?;
    report::write_run(&dir, &config, &record, &metrics)?;
    Ok((dir, metrics))
}

/// Outcome of one (seed, mode) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub mode: Mode,
    pub status: String,
    pub metrics: Option<RunMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spread {
    pub median: f64,
    pub iqr: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Self {
        Self {
            median: median(values),
            iqr: quantile(values, 0.75) - quantile(values, 0.25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeAggregate {
    pub mode: Mode,
    pub completed: usize,
    pub final_eval: Spread,
    pub final_retained: Spread,
    pub recovery_error: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepOutcome {
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<ModeAggregate>,
}

const SWEEP_MODES: [Mode; 2] = [Mode::AcLora, Mode::FixedRank];

fn aggregate(rows: &[SweepRow], mode: Mode) -> ModeAggregate {
    let done: Vec<&RunMetrics> = rows
        .iter()
        .filter(|r| r.mode == mode)
        .filter_map(|r| r.metrics.as_ref())
        .collect();
    let pick = |f: fn(&RunMetrics) -> f64| done.iter().map(|m| f(m)).collect::<Vec<_>>();
    ModeAggregate {
        mode,
        completed: done.len(),
        final_eval: Spread::of(&pick(|m| m.final_eval_loss.unwrap_or(f64::NAN))),
        final_retained: Spread::of(&pick(|m| m.final_retained as f64)),
        recovery_error: Spread::of(&pick(|m| m.recovery_error)),
    }
}

/// Runs both modes for every seed, `jobs` cells at a time.
///
/// Rows come back ordered by seed, then mode, whatever the job count.
pub fn sweep(
    config: &RunConfig,
    seeds: &[u64],
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<SweepOutcome, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let cells: Vec<(u64, Mode)> = seeds
        .iter()
        .flat_map(|&s| SWEEP_MODES.iter().map(move |&m| (s, m)))
        .collect();
    let results: Vec<Mutex<Option<SweepRow>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);

    let run_cell = |seed: u64, mode: Mode| -> SweepRow {
        let mut cfg = config.with_seed(seed);
        cfg.train.mode = mode;
        let outcome = execute(&cfg).and_then(|(record, metrics)| {
            if let Some(dir) = out_dir {
                let run_dir = dir.join(RUNS_DIR).join(format!("seed{seed}_{mode}"));
                report::write_run(&run_dir, &cfg, &record, &metrics)?;
            }
            Ok(metrics)
        });
        let (status, metrics) = match outcome {
            Ok(m) => ("ok".to_string(), Some(m)),
            Err(CliError::Diverged(_)) => ("diverged".to_string(), None),
            Err(e) => (format!("failed: {e}"), None),
        };
        SweepRow {
            seed,
            mode,
            status,
            metrics,
        }
    };

    std::thread::scope(|scope| {
        for _ in 0..jobs.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(seed, mode)) = cells.get(i) else {
                    break;
                };
                let row = run_cell(seed, mode);
                *results[i].lock().expect("result slot") = Some(row);
            });
        }
    });

    let rows: Vec<SweepRow> = results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every cell ran"))
        .collect();
    let aggregates = SWEEP_MODES.iter().map(|&m| aggregate(&rows, m)).collect();
    Ok(SweepOutcome {
        seeds: seeds.to_vec(),
        rows,
        aggregates,
    })
}

fn write_sweep_csv(path: &Path, outcome: &SweepOutcome) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record([
        "seed",
        "mode",
        "final_eval",
        "final_I",
        "recovery_error",
        "final_eval_iqr",
        "final_I_iqr",
        "recovery_error_iqr",
        "status",
    ])?;
    for r in &outcome.rows {
        let (eval, retained, err) = match &r.metrics {
            Some(m) => (
                m.final_eval_loss.map(|v| v.to_string()).unwrap_or_default(),
                m.final_retained.to_string(),
                m.recovery_error.to_string(),
            ),
            None => Default::default(),
        };
        w.write_record([
            r.seed.to_string(),
            r.mode.to_string(),
            eval,
            retained,
            err,
            String::new(),
            String::new(),
            String::new(),
            r.status.clone(),
        ])?;
    }
    for a in &outcome.aggregates {
        w.write_record([
            "median".to_string(),
            a.mode.to_string(),
            a.final_eval.median.to_string(),
            a.final_retained.median.to_string(),
            a.recovery_error.median.to_string(),
            a.final_eval.iqr.to_string(),
            a.final_retained.iqr.to_string(),
            a.recovery_error.iqr.to_string(),
            format!("{} of {} ok", a.completed, outcome.seeds.len()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    #[serde(flatten)]
    outcome: &'a SweepOutcome,
}

pub fn cmd_sweep(
    config_path: &Path,
    seeds: &[u64],
    jobs: usize,
    opts: &RunOptions,
) -> Result<(PathBuf, SweepOutcome), CliError> {
    let config = RunConfig::load(config_path, &opts.overrides)?;
    let dir = config.resolved_output(opts.output_root.as_deref());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let outcome = sweep(&config, seeds, jobs, Some(&dir))?;
    write_sweep_csv(&dir.join(SWEEP_FILE), &outcome)?;
    report::write_json(
        &dir.join(SWEEP_SUMMARY_FILE),
        &SweepSummary {
            schema_version: report::SCHEMA_VERSION,
            config: &config,
            outcome: &outcome,
        },
    )?;
    if let Some(bad) = outcome.rows.iter().find(|r| r.metrics.is_none()) {
        let msg = format!("seed {} ({}) did not complete: {}", bad.seed, bad.mode, bad.status);
        return Err(if outcome.rows.iter().any(|r| r.status == "diverged") {
            CliError::Diverged(msg)
        } else {
            CliError::Failed(anyhow::anyhow!(msg))
        });
    }
    Ok((dir, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryCell {
    pub dimension: usize,
    pub samples: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub predicted_mean: f64,
}

#[derive(Serialize)]
struct TheorySummary<'a> {
    schema_version: u32,
    #[serde(flatten)]
    outcome: &'a TheoryOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryOutcome {
    pub dims: Vec<usize>,
    pub samples: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub cells: Vec<TheoryCell>,
    /// Medians strictly fall as the sample count grows, for every dimension.
    pub median_decreasing_in_samples: bool,
    /// Medians strictly fall as the dimension grows, for every sample count.
    pub median_decreasing_in_dimension: bool,
}

impl TheoryOutcome {
    pub fn cell(&self, dimension: usize, samples: usize) -> Option<&TheoryCell> {
        self.cells
            .iter()
            .find(|c| c.dimension == dimension && c.samples == samples)
    }
}

/// Sphere ratio experiment over a grid of dimensions and sample counts.
///
/// Every cell uses the same seed; trials are keyed by index within it.
pub fn theory(
    dims: &[usize],
    samples: &[usize],
    trials: usize,
    seed: u64,
) -> Result<(TheoryOutcome, Vec<SphereSummary>), CliError> {
    if dims.is_empty() || samples.is_empty() {
        return Err(CliError::Usage("--dims and --samples need at least one value".into()));
    }
    if trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    if dims.contains(&0) || samples.contains(&0) {
        return Err(CliError::Usage("dimensions and sample counts must be at least 1".into()));
    }
    let mut summaries = Vec::new();
    for &dimension in dims {
        for &n in samples {
            let exp = SphereExperiment {
                dimension,
                samples: n,
                trials,
                seed,
            };
            summaries.push(sphere_ratio_experiment(&exp).map_err(|e| CliError::Usage(e.to_string()))?);
        }
    }
    let cells: Vec<TheoryCell> = summaries
        .iter()
        .map(|s| TheoryCell {
            dimension: s.experiment.dimension,
            samples: s.experiment.samples,
            mean: s.mean,
            std: s.std,
            median: s.median,
            predicted_mean: s.predicted_mean,
        })
        .collect();
    let at = |i: usize, j: usize| cells[i * samples.len() + j].median;
    let along_samples = (0..dims.len()).all(|i| (1..samples.len()).all(|j| at(i, j) < at(i, j - 1)));
    let along_dims = (0..samples.len()).all(|j| (1..dims.len()).all(|i| at(i, j) < at(i - 1, j)));
    Ok((
        TheoryOutcome {
            dims: dims.to_vec(),
            samples: samples.to_vec(),
            trials,
            seed,
            cells,
            median_decreasing_in_samples: along_samples,
            median_decreasing_in_dimension: along_dims,
        },
        summaries,
    ))
}

pub fn cmd_theory(
    dims: &[usize],
    samples: &[usize],
    trials: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<TheoryOutcome, CliError> {
    let (outcome, summaries) = theory(dims, samples, trials, seed)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let path = out_dir.join(THEORY_FILE);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["dimension", "samples", "trial", "ratio"])
        .context("writing theory csv")?;
    for s in &summaries {
        for (t, r) in s.ratios.iter().enumerate() {
            w.write_record([
                s.experiment.dimension.to_string(),
                s.experiment.samples.to_string(),
                t.to_string(),
                r.to_string(),
            ])
            .context("writing theory csv")?;
        }
    }
    w.flush().context("writing theory csv")?;
    report::write_json(
        &out_dir.join(THEORY_SUMMARY_FILE),
        &TheorySummary {
            schema_version: report::SCHEMA_VERSION,
            outcome: &outcome,
        },
    )?;
    Ok(outcome)
}

/// Redraws the plots of an existing run directory from its CSV files.
pub fn cmd_plot(run_dir: &Path) -> Result<(), CliError> {
    let epochs = report::read_epochs(&run_dir.join(report::EPOCHS_FILE))?;
    let restarts = report::read_restarts(&run_dir.join(report::RESTARTS_FILE))?;
    plot::write_plots(run_dir, &epochs, &restarts)?;
    Ok(())
}
