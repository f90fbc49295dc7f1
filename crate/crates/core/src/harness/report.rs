//! CSV, summary and plot-script output.
//!
//! Floating-point fields are printed with 17 significant digits so that a
//! parse of the CSV recovers them exactly. Wall-clock times live in a separate
//! timings file; the main CSV depends only on the config and seeds.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::{ExperimentKind, ResultRow};
use crate::error::{Error, Result};

pub const CSV_COLUMNS: &[&str] = &[
    "kind",
    "model",
    "method",
    "m",
    "n",
    "r_true",
    "rank_used",
    "p",
    "noise_spec",
    "sigma2",
    "snr",
    "noise_ratio",
    "lambda_spec",
    "lambda",
    "replicate",
    "seed",
    "status",
    "test_error",
    "train_error",
    "rel_fro_error",
    "top_sv",
    "overlap_left",
    "overlap_right",
    "iterations",
    "termination",
    "theory_z",
    "theory_a",
    "theory_b",
    "theory_rel_mse",
    "theory_t",
];

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn record(row: &ResultRow) -> Vec<String> {
    vec![
        row.kind.to_string(),
        row.model.to_string(),
        row.method.to_string(),
        row.m.to_string(),
        row.n.to_string(),
        row.r_true.to_string(),
        row.rank_used.to_string(),
        float(row.p),
        row.noise_spec.to_string(),
        float(row.sigma2),
        float(row.snr),
        float(row.noise_ratio),
        row.lambda_spec.to_string(),
        float(row.lambda),
        row.replicate.to_string(),
        row.seed.to_string(),
        row.status.clone(),
        float(row.test_error),
        float(row.train_error),
        float(row.rel_fro_error),
        float(row.top_sv),
        float(row.overlap_left),
        float(row.overlap_right),
        row.iterations.to_string(),
        row.termination.clone(),
        float(row.theory_z),
        float(row.theory_a),
        float(row.theory_b),
        float(row.theory_rel_mse),
        float(row.theory_t),
    ]
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

/// Incremental CSV writer; the header goes out on creation and every row is
/// flushed as it arrives.
pub struct RowWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl RowWriter<File> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(File::create(path)?)
    }
}

impl<W: Write> RowWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(CSV_COLUMNS).map_err(csv_error)?;
        inner.flush()?;
        Ok(RowWriter { inner })
    }

    pub fn write(&mut self, row: &ResultRow) -> Result<()> {
        self.inner.write_record(record(row)).map_err(csv_error)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn emit_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = RowWriter::create(path)?;
    for row in rows {
        w.write(row)?;
    }
    w.finish()
}

/// Replicate statistics of one estimator cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    /// The cell coordinates, as printed in the main CSV.
    pub key: Vec<String>,
    pub ok: usize,
    pub failed: usize,
    /// `(mean, standard error)` per metric in [`SUMMARY_METRICS`] order.
    pub stats: Vec<(f64, f64)>,
}

/// Columns identifying an estimator cell; measured noise levels vary per
/// replicate and are left out.
const KEY_COLUMNS: &[&str] = &[
    "kind",
    "model",
    "method",
    "m",
    "n",
    "r_true",
    "rank_used",
    "p",
    "noise_spec",
    "lambda_spec",
];

fn cell_key(row: &ResultRow) -> Vec<String> {
    let full = record(row);
    KEY_COLUMNS
        .iter()
        .map(|k| full[CSV_COLUMNS.iter().position(|c| c == k).expect("key column exists")].clone())
        .collect()
}
pub const SUMMARY_METRICS: &[&str] = &[
    "test_error",
    "train_error",
    "rel_fro_error",
    "lambda",
    "top_sv",
    "overlap_left",
    "overlap_right",
];

fn metrics(row: &ResultRow) -> [f64; 7] {
    [
        row.test_error,
        row.train_error,
        row.rel_fro_error,
        row.lambda,
        row.top_sv,
        row.overlap_left,
        row.overlap_right,
    ]
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Groups rows by estimator cell in first-seen
/// order and averages the successful replicates.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<Vec<String>> = Vec::new();
    let mut groups: BTreeMap<Vec<String>, Vec<&ResultRow>> = BTreeMap::new();
    for row in rows {
        let key = cell_key(row);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(row);
    }
    order
        .into_iter()
        .map(|key| {
            let members = &groups[&key];
            let ok: Vec<&&ResultRow> = members.iter().filter(|r| r.is_ok()).collect();
            let stats = (0..SUMMARY_METRICS.len())
                .map(|k| mean_stderr(&ok.iter().map(|r| metrics(r)[k]).collect::<Vec<_>>()))
                .collect();
            SummaryRow {
                ok: ok.len(),
                failed: members.len() - ok.len(),
                key,
                stats,
            }
        })
        .collect()
}

pub fn emit_summary(summary: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header: Vec<String> = KEY_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(["ok".to_string(), "failed".to_string()]);
    for m in SUMMARY_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_stderr"));
    }
    w.write_record(&header).map_err(csv_error)?;
    for s in summary {
        let mut rec = s.key.clone();
        rec.push(s.ok.to_string());
        rec.push(s.failed.to_string());
        for &(mean, se) in &s.stats {
            rec.push(float(mean));
            rec.push(float(se));
        }
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_timings(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["row", "seed", "rank_used", "method", "lambda_spec", "wall_seconds"])
        .map_err(csv_error)?;
    for (i, r) in rows.iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.seed.to_string(),
            r.rank_used.to_string(),
            r.method.to_string(),
            r.lambda_spec.to_string(),
            format!("{:.6}", r.wall_time),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn x_column(kind: ExperimentKind, rows: &[ResultRow]) -> &'static str {
    match kind {
        ExperimentKind::SweepRank => "rank_used",
        ExperimentKind::SweepLambda => "lambda",
        ExperimentKind::TheoryCheck => "noise_ratio",
        ExperimentKind::SingleRun => "replicate",
        ExperimentKind::SweepNoise => {
            if rows.iter().any(|r| r.model == super::ModelKind::Spiked) {
                "noise_ratio"
            } else {
                "snr"
            }
        }
    }
}

/// Gnuplot script drawing the replicate-averaged error of every
/// (method, lambda) series against the swept parameter. The CSV is referenced
/// by file name, relative to the script's directory.
pub fn emit_plotscript(
    rows: &[ResultRow],
    kind: ExperimentKind,
    csv_path: impl AsRef<Path>,
    script_path: impl AsRef<Path>,
) -> Result<()> {
    let csv_name = csv_path
        .as_ref()
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::invalid("csv path has no file name"))?;
    let png = format!("{}.png", csv_name.trim_end_matches(".csv"));
    let x = x_column(kind, rows);
    let y = if kind == ExperimentKind::TheoryCheck { "rel_fro_error" } else { "test_error" };

    let mut series: Vec<(String, String)> = Vec::new();
    for r in rows {
        let s = (r.method.to_string(), r.lambda_spec.to_string());
        if !series.contains(&s) {
            series.push(s);
        }
    }

    let mut out = String::new();
    out.push_str("# gnuplot script; run from the directory holding the CSV.\n");
    out.push_str("set datafile separator \",\"\n");
    out.push_str("set datafile columnheaders\n");
    out.push_str("set terminal pngcairo size 900,600 noenhanced\n");
    out.push_str(&format!("set output \"{png}\"\n"));
    out.push_str(&format!("set xlabel \"{x}\"\nset ylabel \"{y}\"\n"));
    out.push_str("set key top right\nset grid\n");
    let mut plots: Vec<String> = series
        .iter()
        .map(|(method, lambda)| {
            format!(
                "\"{csv_name}\" using (column(\"{x}\")):((strcol(\"method\") eq \"{method}\" && strcol(\"lambda_spec\") eq \"{lambda}\" && strcol(\"status\") eq \"ok\") ? column(\"{y}\") : NaN) smooth unique with linespoints title \"{method} lambda={lambda}\""
            )
        })
        .collect();
    if kind == ExperimentKind::TheoryCheck {
        plots.push(format!(
            "\"{csv_name}\" using (column(\"{x}\")):(column(\"theory_rel_mse\")) smooth unique with lines dashtype 2 title \"theory\""
        ));
    }
    if plots.is_empty() {
        plots.push(format!("\"{csv_name}\" using (column(\"{x}\")):(column(\"{y}\")) with points title \"{y}\""));
    }
    out.push_str("plot ");
    out.push_str(&plots.join(", \\\n     "));
    out.push('\n');
    std::fs::write(script_path, out)?;
    Ok(())
}
