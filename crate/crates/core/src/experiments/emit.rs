//! Result rows and their CSV / JSON persistence.
//!
//! Floats are written in shortest round-trip form. Non-finite values (aborted
//! replications, undefined fits) are written as empty CSV fields or JSON `null`
//! and read back as NaN.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::OutputFormat;
use crate::error::{Error, Result};

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One measured quantity of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    pub metric: String,
    #[serde(with = "finite_or_null")]
    pub value: f64,
    pub runtime_ms: u64,
    pub aborted: bool,
}

pub const RESULT_COLUMNS: [&str; 8] =
    ["experiment_id", "n", "replication", "seed", "metric", "value", "runtime_ms", "aborted"];

/// Per-`(metric, n)` Monte-Carlo mean over non-aborted replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment_id: String,
    pub metric: String,
    pub n: usize,
    pub count: usize,
    pub aborted: usize,
    #[serde(with = "finite_or_null")]
    pub mean: f64,
    #[serde(with = "finite_or_null")]
    pub stderr: f64,
    #[serde(with = "finite_or_null")]
    pub log_n: f64,
    #[serde(with = "finite_or_null")]
    pub log_mean: f64,
}

pub const SUMMARY_COLUMNS: [&str; 9] =
    ["experiment_id", "metric", "n", "count", "aborted", "mean", "stderr", "log_n", "log_mean"];

/// Log-log slope of a summary metric against `n`; `error` is empty on success.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub experiment_id: String,
    pub metric: String,
    pub log_correction: bool,
    pub points: usize,
    #[serde(with = "finite_or_null")]
    pub slope: f64,
    #[serde(with = "finite_or_null")]
    pub intercept: f64,
    #[serde(with = "finite_or_null")]
    pub r_squared: f64,
    pub error: String,
}

pub const FIT_COLUMNS: [&str; 8] =
    ["experiment_id", "metric", "log_correction", "points", "slope", "intercept", "r_squared", "error"];

pub fn write_table<T: Serialize, W: Write>(rows: &[T], columns: &[&str], format: OutputFormat, out: W) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record(columns)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        OutputFormat::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, rows)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
    }
    Ok(())
}

pub fn read_table<T: DeserializeOwned>(path: &Path, format: OutputFormat) -> Result<Vec<T>> {
    let file = File::open(path)?;
    match format {
        OutputFormat::Csv => {
            let mut r = csv::Reader::from_reader(file);
            r.deserialize().map(|row| row.map_err(Error::from)).collect()
        }
        OutputFormat::Json => Ok(serde_json::from_reader(std::io::BufReader::new(file))?),
    }
}

/// Paths written by [`emit`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFiles {
    pub detail: PathBuf,
    pub summary: PathBuf,
    pub fits: PathBuf,
    pub plots: Vec<PathBuf>,
}

pub fn file_stem(metric: &str) -> String {
    metric.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes detail, summary and fit tables plus one two-column plot-data file per fit
/// metric into `dir`, prefixed by the experiment id.
pub fn emit(
    experiment_id: &str,
    rows: &[ResultRow],
    summary: &[SummaryRow],
    fits: &[FitRow],
    dir: &Path,
    format: OutputFormat,
) -> Result<EmittedFiles> {
    std::fs::create_dir_all(dir)?;
    let ext = format.extension();
    let path = |suffix: &str| dir.join(format!("{experiment_id}_{suffix}.{ext}"));
    let files = EmittedFiles {
        detail: path("detail"),
        summary: path("summary"),
        fits: path("fit"),
        plots: fits
            .iter()
            .map(|f| dir.join(format!("{experiment_id}_{}_plot.dat", file_stem(&f.metric))))
            .collect(),
    };
    write_table(rows, &RESULT_COLUMNS, format, BufWriter::new(File::create(&files.detail)?))?;
    write_table(summary, &SUMMARY_COLUMNS, format, BufWriter::new(File::create(&files.summary)?))?;
    write_table(fits, &FIT_COLUMNS, format, BufWriter::new(File::create(&files.fits)?))?;
    for (fit, plot) in fits.iter().zip(&files.plots) {
        let mut w = BufWriter::new(File::create(plot)?);
        writeln!(w, "# log_n log_error ({})", fit.metric)?;
        for s in summary.iter().filter(|s| s.metric == fit.metric && s.log_mean.is_finite()) {
            writeln!(w, "{} {}", s.log_n, s.log_mean)?;
        }
        w.flush()?;
    }
    Ok(files)
}
