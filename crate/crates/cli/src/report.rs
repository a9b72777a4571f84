//! Result files written by the subcommands.
//!
//! A run directory holds:
//!
//! | file            | contents                                                        |
//! |-----------------|-----------------------------------------------------------------|
//! | `summary.json`  | config echo and final metrics                                   |
//! | `epochs.csv`    | `epoch,train_loss,eval_loss,p,alpha,I_0,…` one row per epoch    |
//! | `restarts.csv`  | `epoch,layer,I,sigma_up,sigma_down,spectrum_json` per adapter   |
//! | `adapter.json`  | learned factors, row-major                                      |
//!
//! `p` and `alpha` are empty on epochs without a restart. `spectrum_json` is
//! `{"up":[…],"down":[…]}`, the singular values of each factor just before the
//! restart. Numbers are written in their shortest round-trip form, so the
//! files are byte-identical across reruns of the same config.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use autorank::analysis::{effective_rank, recovery_error};
use autorank::train::EpochLog;
use autorank::{AdapterNetwork, Matrix, Mode, RestartReport, SyntheticTask, TrainRecord};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const SUMMARY_FILE: &str = "summary.json";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const RESTARTS_FILE: &str = "restarts.csv";
pub const ADAPTER_FILE: &str = "adapter.json";

/// Written as `schema_version` in every JSON summary. Bumped when a field or
/// CSV column changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

/// Energy fraction used for the effective rank reported in summaries.
pub const SUMMARY_ENERGY: f64 = 0.99;

/// One adapter at one restart.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartRow {
    pub epoch: usize,
    pub layer: usize,
    pub retained: usize,
    pub sigma_up: f64,
    pub sigma_down: f64,
    pub spectrum: FactorSpectra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpectra {
    pub up: Vec<f64>,
    pub down: Vec<f64>,
}

pub fn restart_rows(reports: &[RestartReport]) -> Vec<RestartRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.modules.iter().map(move |m| RestartRow {
                epoch: r.epoch,
                layer: m.layer,
                retained: m.retained,
                sigma_up: m.up.sigma,
                sigma_down: m.down.sigma,
                spectrum: FactorSpectra {
                    up: m.up.spectrum_before.clone(),
                    down: m.down.spectrum_before.clone(),
                },
            })
        })
        .collect()
}

/// Final metrics of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: Mode,
    pub epochs: usize,
    pub restart_epochs: Vec<usize>,
    pub retained_trajectory: Vec<usize>,
    pub final_train_loss: f64,
    pub final_eval_loss: Option<f64>,
    pub final_retained: usize,
    pub true_rank: usize,
    pub recovery_error: f64,
    pub effective_rank: usize,
}

impl RunMetrics {
    pub fn new(task: &SyntheticTask, record: &TrainRecord, mode: Mode) -> Result<Self> {
        let update = record.network.layers()[0].effective_update();
        Ok(Self {
            mode,
            epochs: record.epochs.len(),
            restart_epochs: record.restarts.iter().map(|r| r.epoch).collect(),
            retained_trajectory: record.restarts.iter().map(RestartReport::max_retained).collect(),
            final_train_loss: record.final_train_loss(),
            final_eval_loss: record.final_eval_loss(),
            final_retained: record.final_retained(),
            true_rank: task.true_rank,
            recovery_error: recovery_error(&update, &task.true_update)?,
            effective_rank: effective_rank(&update, SUMMARY_ENERGY)?,
        })
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    #[serde(flatten)]
    metrics: &'a RunMetrics,
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn write_epochs(path: &Path, epochs: &[EpochLog]) -> Result<()> {
    let layers = epochs.first().map_or(0, |e| e.retained.len());
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header: Vec<String> = ["epoch", "train_loss", "eval_loss", "p", "alpha"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..layers).map(|j| format!("I_{j}")));
    w.write_record(&header)?;
    for e in epochs {
        let mut row = vec![
            e.epoch.to_string(),
            num(e.train_loss),
            opt(e.eval_loss),
            opt(e.threshold),
            opt(e.alpha),
        ];
        row.extend(e.retained.iter().map(usize::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_restarts(path: &Path, rows: &[RestartRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["epoch", "layer", "I", "sigma_up", "sigma_down", "spectrum_json"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.layer.to_string(),
            r.retained.to_string(),
            num(r.sigma_up),
            num(r.sigma_down),
            serde_json::to_string(&r.spectrum)?,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct MatrixDump {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl From<&Matrix> for MatrixDump {
    fn from(m: &Matrix) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().iter().copied().collect(),
        }
    }
}

#[derive(Serialize)]
struct LayerDump {
    layer: usize,
    up: MatrixDump,
    down: MatrixDump,
}

pub fn write_adapter(path: &Path, network: &AdapterNetwork) -> Result<()> {
    let layers: Vec<LayerDump> = network
        .layers()
        .iter()
        .enumerate()
        .map(|(layer, a)| LayerDump {
            layer,
            up: (&a.up).into(),
            down: (&a.down).into(),
        })
        .collect();
    let json = serde_json::json!({ "layers": layers });
    write_json(path, &json)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes every run file into `dir`, creating it if needed.
pub fn write_run(
    dir: &Path,
    config: &RunConfig,
    record: &TrainRecord,
    metrics: &RunMetrics,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join(SUMMARY_FILE), &RunSummary { schema_version: SCHEMA_VERSION, config, metrics })?;
    write_epochs(&dir.join(EPOCHS_FILE), &record.epochs)?;
    write_restarts(&dir.join(RESTARTS_FILE), &restart_rows(&record.restarts))?;
    write_adapter(&dir.join(ADAPTER_FILE), &record.network)?;
    if config.emit_plots {
        crate::plot::write_plots(dir, &record.epochs, &restart_rows(&record.restarts))?;
    }
    Ok(())
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    let raw = record.get(i).unwrap_or("");
    raw.parse()
        .map_err(|_| anyhow::anyhow!("{}: bad value `{raw}` in column {}", path.display(), i + 1))
}

fn opt_field(record: &csv::StringRecord, i: usize, path: &Path) -> Result<Option<f64>> {
    match record.get(i) {
        Some("") | None => Ok(None),
        Some(_) => field(record, i, path).map(Some),
    }
}

pub fn read_epochs(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let columns = r.headers()?.len();
    if columns < 5 {
        bail!("{}: expected at least 5 columns", path.display());
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(EpochLog {
            epoch: field(&rec, 0, path)?,
            train_loss: field(&rec, 1, path)?,
            eval_loss: opt_field(&rec, 2, path)?,
            threshold: opt_field(&rec, 3, path)?,
            alpha: opt_field(&rec, 4, path)?,
            retained: (5..columns).map(|i| field(&rec, i, path)).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

pub fn read_restarts(path: &Path) -> Result<Vec<RestartRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(RestartRow {
            epoch: field(&rec, 0, path)?,
            layer: field(&rec, 1, path)?,
            retained: field(&rec, 2, path)?,
            sigma_up: field(&rec, 3, path)?,
            sigma_down: field(&rec, 4, path)?,
            spectrum: serde_json::from_str(rec.get(5).unwrap_or(""))
                .with_context(|| format!("{}: bad spectrum_json", path.display()))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let epochs = vec![
            EpochLog {
                epoch: 1,
                train_loss: 0.5,
                eval_loss: Some(0.25),
                threshold: None,
                alpha: None,
                retained: vec![16],
            },
            EpochLog {
                epoch: 2,
                train_loss: 1e-7,
                eval_loss: None,
                threshold: Some(0.9),
                alpha: Some(1.02),
                retained: vec![3],
            },
        ];
        let path = dir.path().join("e.csv");
        write_epochs(&path, &epochs).unwrap();
        assert_eq!(read_epochs(&path).unwrap(), epochs);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,eval_loss,p,alpha,I_0\n"));

        let rows = vec![RestartRow {
            epoch: 10,
            layer: 0,
            retained: 4,
            sigma_up: 0.01,
            sigma_down: 0.02,
            spectrum: FactorSpectra {
                up: vec![3.0, 1.0],
                down: vec![2.0, 0.5],
            },
        }];
        let path = dir.path().join("r.csv");
        write_restarts(&path, &rows).unwrap();
        assert_eq!(read_restarts(&path).unwrap(), rows);
    }

    #[test]
    fn matrix_dump_is_row_major() {
        let m = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = MatrixDump::from(&m);
        assert_eq!((d.rows, d.cols), (2, 3));
        assert_eq!(d.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
