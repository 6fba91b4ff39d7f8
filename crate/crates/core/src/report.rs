//! Run artifacts: per-epoch CSV, JSON summary, portion-summary CSV and the
//! method comparison table. Schemas are documented in `docs/formats.md`.

use crate::error::{Error, Result};
use crate::metrics::PortionRow;
use crate::training::{EpochRecord, TrainReport};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fs::File;
use std::io::Write;
use std::path::Path;

pub const EPOCHS_FILE: &str = "epochs.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PORTIONS_FILE: &str = "portion_summary.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const CACHE_FILE: &str = "dataset.bin";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

fn write_rows<R: Serialize>(rows: &[R], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_epochs_csv(epochs: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    write_rows(epochs, path.as_ref())
}

pub fn read_epochs_csv(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    read_rows(path.as_ref())
}

pub fn write_portion_csv(rows: &[PortionRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(rows, path.as_ref())
}

pub fn read_portion_csv(path: impl AsRef<Path>) -> Result<Vec<PortionRow>> {
    read_rows(path.as_ref())
}

/// Where the converged average portion value is measured.
pub const PORTION_SOURCE: &str = "validation split, best-epoch checkpoint";

/// JSON summary of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    /// Epoch with the best validation loss.
    pub convergence_epoch: usize,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
    pub ce_epoch1: f64,
    pub best_val_ce: f64,
    pub test_ce: f64,
    /// Cumulative training multiplications up to the convergence epoch.
    pub eff_mults_to_convergence: u64,
    /// Cumulative training multiplications over every epoch run.
    pub total_eff_mults: u64,
    pub avg_p_converged: Option<f64>,
    pub avg_p_source: String,
    pub parameter_count: usize,
}

impl RunSummary {
    pub fn from_report(report: &TrainReport) -> Self {
        RunSummary {
            method: report.method.clone(),
            convergence_epoch: report.best_epoch,
            stopped_epoch: report.stopped_epoch,
            early_stopped: report.early_stopped,
            ce_epoch1: report.ce_epoch1(),
            best_val_ce: report.best_val_ce,
            test_ce: report.test_ce,
            eff_mults_to_convergence: report.mults_at_convergence(),
            total_eff_mults: report.total_eff_mults(),
            avg_p_converged: report.avg_p_converged,
            avg_p_source: PORTION_SOURCE.to_string(),
            parameter_count: report.parameter_count,
        }
    }
}

pub fn write_json<S: Serialize>(value: &S, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<S: DeserializeOwned>(path: impl AsRef<Path>) -> Result<S> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One row of the method comparison table. Empty cells mark methods that are
/// listed for completeness but not run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub ce_epoch1: Option<f64>,
    /// Test cross-entropy at the converged checkpoint.
    pub final_ce: Option<f64>,
    pub convergence_epoch: Option<usize>,
    /// Training multiplications up to the convergence epoch.
    pub total_eff_mults: Option<u64>,
    pub note: String,
}

impl ComparisonRow {
    pub fn from_report(label: &str, report: &TrainReport) -> Self {
        ComparisonRow {
            method: label.to_string(),
            ce_epoch1: Some(report.ce_epoch1()),
            final_ce: Some(report.test_ce),
            convergence_epoch: Some(report.best_epoch),
            total_eff_mults: Some(report.mults_at_convergence()),
            note: String::new(),
        }
    }

    pub fn absent(method: &str) -> Self {
        ComparisonRow {
            method: method.to_string(),
            ce_epoch1: None,
            final_ce: None,
            convergence_epoch: None,
            total_eff_mults: None,
            note: "absent by design: external baseline, not implemented here".to_string(),
        }
    }
}

/// Comparison baselines that are listed but not implemented.
pub const ABSENT_METHODS: [&str; 2] = ["Phased LSTM", "Clockwork RNN"];

/// Trained methods followed by the absent-by-design rows.
pub fn comparison_table<'a>(runs: impl IntoIterator<Item = (&'a str, &'a TrainReport)>) -> Vec<ComparisonRow> {
    runs.into_iter()
        .map(|(label, r)| ComparisonRow::from_report(label, r))
        .chain(ABSENT_METHODS.iter().map(|m| ComparisonRow::absent(m)))
        .collect()
}

pub fn write_comparison_csv(rows: &[ComparisonRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(rows, path.as_ref())
}

pub fn read_comparison_csv(path: impl AsRef<Path>) -> Result<Vec<ComparisonRow>> {
    read_rows(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> TrainReport {
        let epochs = vec![
            EpochRecord {
                epoch: 1,
                train_ce: 1.0 / 3.0,
                val_ce: std::f64::consts::LN_2,
                avg_p: Some(0.123_456_789_012_345_67),
                cum_eff_mults: 12_345_678_901,
                wall_seconds: 0.0,
            },
            EpochRecord {
                epoch: 2,
                train_ce: 1e-300,
                val_ce: 0.5,
                avg_p: None,
                cum_eff_mults: u64::MAX,
                wall_seconds: 1.5e-7,
            },
        ];
        TrainReport {
            method: "da_lstm".into(),
            epochs,
            best_epoch: 2,
            stopped_epoch: 2,
            early_stopped: false,
            best_val_ce: 0.5,
            test_ce: 0.625,
            converged_portions: vec![0.25],
            avg_p_converged: Some(0.25),
            parameter_count: 10,
        }
    }

    #[test]
    fn epochs_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(EPOCHS_FILE);
        let r = report();
        write_epochs_csv(&r.epochs, &path).unwrap();
        assert_eq!(read_epochs_csv(&path).unwrap(), r.epochs);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_ce,val_ce,avg_p,cum_eff_mults,wall_seconds\n"));
    }

    #[test]
    fn summary_and_portions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = RunSummary::from_report(&report());
        assert_eq!(s.convergence_epoch, 2);
        assert_eq!(s.eff_mults_to_convergence, u64::MAX);
        write_json(&s, dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(read_json::<RunSummary>(dir.path().join(SUMMARY_FILE)).unwrap(), s);

        let rows = vec![
            PortionRow {
                sweep: "transient_ratio".into(),
                value: "0.1".into(),
                avg_p: Some(0.7),
                samples: 3,
            },
            PortionRow {
                sweep: "transient_ratio".into(),
                value: "0.9".into(),
                avg_p: None,
                samples: 0,
            },
        ];
        write_portion_csv(&rows, dir.path().join(PORTIONS_FILE)).unwrap();
        assert_eq!(read_portion_csv(dir.path().join(PORTIONS_FILE)).unwrap(), rows);
    }

    #[test]
    fn comparison_lists_absent_baselines() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        let rows = comparison_table([("DA-LSTM", &r)]);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].final_ce, Some(0.625));
        assert!(rows[1..].iter().all(|row| row.final_ce.is_none() && !row.note.is_empty()));
        let path = dir.path().join(COMPARISON_FILE);
        write_comparison_csv(&rows, &path).unwrap();
        assert_eq!(read_comparison_csv(&path).unwrap(), rows);
    }
}
