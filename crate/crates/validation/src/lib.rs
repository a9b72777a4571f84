//! Acceptance checks for the rank search library and its driver.
//!
//! Each check returns an [`Outcome`]; the `acceptance` test target runs them
//! all and prints one line per check. Tolerances live in [`tol`].

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use autorank::analysis::median;
use autorank::rng;
use autorank::schedule::{alpha, threshold};
use autorank::spectral::{population_std, restart_layer, signal_indices, svd, SignalSplit};
use autorank::{Mode, TrainConfig};
use autorank_cli::commands::{self, RunOptions, SweepOutcome};
use autorank_cli::config::RunConfig;
use autorank_cli::report;
use rand::Rng;

/// Pinned tolerances and sizes.
pub mod tol {
    use std::ops::RangeInclusive;
    use std::time::Duration;

    pub const SWEEP_SEEDS: std::ops::Range<u64> = 0..10;
    pub const RETAINED_RANGE: RangeInclusive<f64> = 3.0..=5.0;
    pub const SWEEP_TIME_LIMIT: Duration = Duration::from_secs(120);

    pub const IDENTITY_TRIALS: usize = 100;
    pub const IDENTITY_MAX_DIM: usize = 64;
    pub const IDENTITY_REL_ERROR: f64 = 1e-7;
    pub const IDENTITY_SIGMA: f64 = 1e-8;

    pub const VARIANCE_RUNS: u64 = 200;
    pub const VARIANCE_DIM: usize = 64;
    pub const VARIANCE_REL: f64 = 0.10;
    pub const VARIANCE_PASS_FRACTION: f64 = 0.95;

    pub const ORACLE_SPECTRA: usize = 1000;
    pub const ORACLE_P_VALUES: usize = 10;

    pub const SCHEDULE_EPS: f64 = 1e-15;

    pub const SPHERE_DIMS: [usize; 3] = [4, 16, 64];
    pub const SPHERE_SAMPLES: [usize; 3] = [16, 64, 256];
    pub const SPHERE_TRIALS: usize = 2000;
    pub const SPHERE_MEAN_REL: f64 = 0.10;
    pub const SPHERE_TIME_LIMIT: Duration = Duration::from_secs(30);

    pub const RESTART_EVENTS: usize = 9;
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(id: u8, name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            id,
            name,
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} [{}] {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

/// The bundled default run configuration.
pub fn default_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/configs/default.conf")
}

pub fn default_config() -> RunConfig {
    RunConfig::load(&default_config_path(), &[]).expect("bundled config parses")
}

/// Whether `config` describes the reference task and schedule.
fn is_reference_setup(c: &RunConfig) -> bool {
    c.task.d == 64
        && c.task.k == 64
        && c.task.spectrum_profile == [4.0, 3.0, 2.0, 1.0]
        && c.task.label_noise_std == 0.05
        && c.train.max_rank == 16
        && c.train.total_epochs == 100
        && c.train.restart_interval == 10
}

/// Both modes over the reference seeds, with wall-clock time.
pub fn reference_sweep() -> (RunConfig, SweepOutcome, Duration) {
    let config = default_config();
    let seeds: Vec<u64> = tol::SWEEP_SEEDS.collect();
    let start = Instant::now();
    let outcome = commands::sweep(&config, &seeds, 1, None).expect("sweep runs");
    (config, outcome, start.elapsed())
}

fn mode_values(outcome: &SweepOutcome, mode: Mode, f: impl Fn(&report::RunMetrics) -> f64) -> Vec<f64> {
    outcome
        .rows
        .iter()
        .filter(|r| r.mode == mode)
        .map(|r| r.metrics.as_ref().map_or(f64::NAN, &f))
        .collect()
}

pub fn rank_recovery(config: &RunConfig, outcome: &SweepOutcome, elapsed: Duration) -> Outcome {
    let retained = mode_values(outcome, Mode::AcLora, |m| m.final_retained as f64);
    let med = median(&retained);
    let reference = is_reference_setup(config);
    let in_range = tol::RETAINED_RANGE.contains(&med);
    let fast = elapsed <= tol::SWEEP_TIME_LIMIT;
    Outcome::new(
        1,
        "rank recovery",
        reference && in_range && fast && retained.iter().all(|v| v.is_finite()),
        format!(
            "median final I = {med} over {} seeds (want {}..={}), per seed {:?}; sweep of both modes took {:.1}s (limit {}s)",
            retained.len(),
            tol::RETAINED_RANGE.start(),
            tol::RETAINED_RANGE.end(),
            retained,
            elapsed.as_secs_f64(),
            tol::SWEEP_TIME_LIMIT.as_secs()
        ),
    )
}

pub fn overfitting(outcome: &SweepOutcome) -> Outcome {
    let eval = |mode| median(&mode_values(outcome, mode, |m| m.final_eval_loss.unwrap_or(f64::NAN)));
    let err = |mode| median(&mode_values(outcome, mode, |m| m.recovery_error));
    let (ae, be) = (eval(Mode::AcLora), eval(Mode::FixedRank));
    let (ar, br) = (err(Mode::AcLora), err(Mode::FixedRank));
    Outcome::new(
        2,
        "overfitting mitigation",
        ae <= be && ar <= br,
        format!(
            "median eval loss {ae:.6e} vs baseline {be:.6e}; median recovery error {ar:.6} vs baseline {br:.6}"
        ),
    )
}

pub fn restart_identity() -> Outcome {
    let mut g = rng::seeded(301);
    let mut worst_err: f64 = 0.0;
    let mut worst_sigma: f64 = 0.0;
    for _ in 0..tol::IDENTITY_TRIALS {
        let rows = g.random_range(1..=tol::IDENTITY_MAX_DIM);
        let cols = g.random_range(1..=tol::IDENTITY_MAX_DIM);
        let m = rng::gaussian_matrix(&mut g, rows, cols, 1.0);
        let q = rows.min(cols);
        let split = SignalSplit::prefix(q, q, 1.0).expect("full split");
        let (out, sigma) = restart_layer(&m, &split, &mut g).expect("restart");
        worst_err = worst_err.max((&out - &m).norm() / m.norm());
        worst_sigma = worst_sigma.max(sigma);
    }
    Outcome::new(
        3,
        "restart identity",
        worst_err <= tol::IDENTITY_REL_ERROR && worst_sigma <= tol::IDENTITY_SIGMA,
        format!(
            "{} matrices up to {d}x{d}: worst relative error {worst_err:.2e} (limit {:.0e}), worst sigma {worst_sigma:.2e} (limit {:.0e})",
            tol::IDENTITY_TRIALS,
            tol::IDENTITY_REL_ERROR,
            tol::IDENTITY_SIGMA,
            d = tol::IDENTITY_MAX_DIM
        ),
    )
}

pub fn variance_matching() -> Outcome {
    let n = tol::VARIANCE_DIM;
    let mut within = 0;
    for seed in 0..tol::VARIANCE_RUNS {
        let mut g = rng::seeded(seed);
        let m = rng::gaussian_matrix(&mut g, n, n, 1.0);
        let split = SignalSplit::prefix(n / 2, n, 0.5).expect("half split");
        let (out, sigma) = restart_layer(&m, &split, &mut g).expect("restart");
        let kept = svd(&m).expect("svd").reconstruct_prefix(n / 2);
        let spread = population_std(&(out - kept));
        if (spread / sigma - 1.0).abs() <= tol::VARIANCE_REL {
            within += 1;
        }
    }
    let fraction = within as f64 / tol::VARIANCE_RUNS as f64;
    Outcome::new(
        4,
        "variance matching",
        fraction >= tol::VARIANCE_PASS_FRACTION,
        format!(
            "{within} of {} runs have injected std within {:.0}% of sigma (need {:.0}%)",
            tol::VARIANCE_RUNS,
            tol::VARIANCE_REL * 100.0,
            tol::VARIANCE_PASS_FRACTION * 100.0
        ),
    )
}

/// `{i : d₀² + … + dᵢ² < p·Σd²}`, or `{0}` when that is empty.
fn brute_force_signal_set(d: &[f64], p: f64) -> BTreeSet<usize> {
    let mut total = 0.0;
    for v in d {
        total += v * v;
    }
    let mut set = BTreeSet::new();
    for i in 0..d.len() {
        let mut prefix = 0.0;
        for v in &d[..=i] {
            prefix += v * v;
        }
        if prefix < p * total {
            set.insert(i);
        }
    }
    if set.is_empty() {
        set.insert(0);
    }
    set
}

pub fn threshold_oracle() -> Outcome {
    let mut g = rng::seeded(505);
    let mut mismatches = 0;
    let mut checked = 0;
    for s in 0..tol::ORACLE_SPECTRA {
        let len = g.random_range(1..=64);
        let mut d: Vec<f64> = (0..len)
            .map(|_| match s % 4 {
                0 => rng::gaussian(&mut g, 1.0).abs(),
                1 => (-3.0 * g.random::<f64>()).exp(),
                2 => (g.random::<f64>() * 4.0).floor(),
                _ => rng::gaussian(&mut g, 1.0).abs() * if g.random::<f64>() < 0.3 { 0.0 } else { 1.0 },
            })
            .collect();
        d.sort_by(|a, b| b.total_cmp(a));
        if d[0] == 0.0 {
            d[0] = 1.0;
        }
        let mut ps = vec![0.0, 1.0];
        ps.extend((2..tol::ORACLE_P_VALUES).map(|_| g.random::<f64>()));
        for p in ps {
            let got: BTreeSet<usize> = signal_indices(&d, p).expect("valid spectrum").signal().collect();
            if got != brute_force_signal_set(&d, p) {
                mismatches += 1;
            }
            checked += 1;
        }
    }
    Outcome::new(
        5,
        "threshold-set oracle",
        mismatches == 0,
        format!("{mismatches} mismatches in {checked} (spectrum, p) pairs"),
    )
}

pub fn schedule_exactness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut endpoints_ok = true;
    for total in [1usize, 2, 3, 7, 10, 64, 100, 333, 1000] {
        endpoints_ok &= alpha(0, total) == Ok(1.0) && alpha(total, total) == Ok(2.0);
        let step = 1.0 / total as f64;
        for e in 0..total {
            let diff = alpha(e + 1, total).expect("alpha") - alpha(e, total).expect("alpha");
            worst = worst.max((diff - step).abs());
        }
    }
    let p = threshold(0.25, 1.5).expect("threshold");
    let p_err = (p - 0.875).abs();
    Outcome::new(
        6,
        "schedule exactness",
        endpoints_ok && worst <= tol::SCHEDULE_EPS && p_err <= tol::SCHEDULE_EPS,
        format!(
            "endpoints {}; worst affine-step error {worst:.1e}; threshold(0.25, 1.5) = {p} (error {p_err:.1e}, limit {:.0e})",
            if endpoints_ok { "exact" } else { "wrong" },
            tol::SCHEDULE_EPS
        ),
    )
}

pub fn sphere_monte_carlo() -> Outcome {
    let start = Instant::now();
    let (outcome, _) = commands::theory(&tol::SPHERE_DIMS, &tol::SPHERE_SAMPLES, tol::SPHERE_TRIALS, 0)
        .expect("valid grid");
    let elapsed = start.elapsed();
    let cell = outcome.cell(16, 64).expect("R=16, lambda=64 cell");
    let rel = (cell.mean / cell.predicted_mean - 1.0).abs();
    let grid: Vec<String> = tol::SPHERE_DIMS
        .iter()
        .map(|&r| {
            let row: Vec<String> = tol::SPHERE_SAMPLES
                .iter()
                .map(|&n| format!("{:.4}", outcome.cell(r, n).expect("cell").median))
                .collect();
            format!("R={r}: [{}]", row.join(", "))
        })
        .collect();
    let passed = rel <= tol::SPHERE_MEAN_REL
        && outcome.median_decreasing_in_samples
        && outcome.median_decreasing_in_dimension
        && elapsed <= tol::SPHERE_TIME_LIMIT;
    Outcome::new(
        7,
        "sphere Monte Carlo",
        passed,
        format!(
            "R=16 lambda=64 mean {:.5} vs predicted {:.5} ({:.2}%, limit {:.0}%); medians decreasing along lambda: {}, along R: {}; medians {}; {:.1}s (limit {}s)",
            cell.mean,
            cell.predicted_mean,
            rel * 100.0,
            tol::SPHERE_MEAN_REL * 100.0,
            outcome.median_decreasing_in_samples,
            outcome.median_decreasing_in_dimension,
            grid.join("; "),
            elapsed.as_secs_f64(),
            tol::SPHERE_TIME_LIMIT.as_secs()
        ),
    )
}

fn run_default_into(root: &Path) -> PathBuf {
    let opts = RunOptions {
        overrides: Vec::new(),
        output_root: Some(root.to_path_buf()),
    };
    commands::cmd_run(&default_config_path(), &opts).expect("run succeeds").0
}

pub fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir"));
    let (da, db) = (run_default_into(a.path()), run_default_into(b.path()));
    let files = [
        report::EPOCHS_FILE,
        report::RESTARTS_FILE,
        report::SUMMARY_FILE,
        report::ADAPTER_FILE,
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(da.join(f)).ok() != fs::read(db.join(f)).ok() || !da.join(f).exists())
        .collect();
    Outcome::new(
        8,
        "determinism",
        differing.is_empty(),
        if differing.is_empty() {
            format!("two runs wrote byte-identical {}", files.join(", "))
        } else {
            format!("files differ between runs: {}", differing.join(", "))
        },
    )
}

pub fn restart_count() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let run = run_default_into(dir.path());
    let rows = report::read_restarts(&run.join(report::RESTARTS_FILE)).expect("restart csv");
    let epochs: Vec<usize> = rows.iter().map(|r| r.epoch).collect();
    let planned = TrainConfig {
        total_epochs: 100,
        restart_interval: 10,
        ..TrainConfig::default()
    }
    .restart_epochs()
    .count();
    Outcome::new(
        9,
        "restart-count bookkeeping",
        rows.len() == tol::RESTART_EVENTS && planned == tol::RESTART_EVENTS,
        format!(
            "{} restart rows at epochs {epochs:?}, {planned} planned (want {})",
            rows.len(),
            tol::RESTART_EVENTS
        ),
    )
}

/// Runs every check in order.
pub fn run_all() -> Vec<Outcome> {
    let (config, sweep, elapsed) = reference_sweep();
    vec![
        rank_recovery(&config, &sweep, elapsed),
        overfitting(&sweep),
        restart_identity(),
        variance_matching(),
        threshold_oracle(),
        schedule_exactness(),
        sphere_monte_carlo(),
        determinism(),
        restart_count(),
    ]
}
