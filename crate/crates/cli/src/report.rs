//! Result rows and CSV output.

use std::io::Write;
use std::path::Path;

/// One `results.csv` line. Rows without a tolerance only document a value
/// and never fail.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub instance: String,
    pub scope: String,
    pub metric: String,
    pub value: f64,
    pub check: Check,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Check {
    None,
    AtMost(f64),
    AtLeast(f64),
    Above(f64),
    /// Pass/fail decided by the producer, with the tolerance shown.
    Given(f64, bool),
}

impl Row {
    pub fn new(instance: impl Into<String>, scope: impl Into<String>, metric: impl Into<String>, value: f64, check: Check) -> Self {
        Self { instance: instance.into(), scope: scope.into(), metric: metric.into(), value, check }
    }

    pub fn info(instance: impl Into<String>, scope: impl Into<String>, metric: impl Into<String>, value: f64) -> Self {
        Self::new(instance, scope, metric, value, Check::None)
    }

    pub fn tolerance(&self) -> Option<f64> {
        match self.check {
            Check::None => None,
            Check::AtMost(t) | Check::AtLeast(t) | Check::Above(t) | Check::Given(t, _) => Some(t),
        }
    }

    /// `None` for documentation rows. NaN values fail every check.
    pub fn pass(&self) -> Option<bool> {
        match self.check {
            Check::None => None,
            Check::AtMost(t) => Some(self.value <= t),
            Check::AtLeast(t) => Some(self.value >= t),
            Check::Above(t) => Some(self.value > t),
            Check::Given(_, p) => Some(p),
        }
    }
}

impl From<(&str, ssnll::risk::CheckRow)> for Row {
    fn from((scope, r): (&str, ssnll::risk::CheckRow)) -> Self {
        Row::new(r.instance, scope, r.check, r.residual, Check::Given(r.tolerance, r.pass))
    }
}

pub fn all_pass(rows: &[Row]) -> bool {
    rows.iter().all(|r| r.pass() != Some(false))
}

pub fn format_value(v: f64) -> String {
    format!("{v:e}")
}

pub const RESULT_HEADER: [&str; 7] = ["config_hash", "instance", "scope", "metric", "value", "tolerance", "pass"];

/// Writes `header` and `records` as CSV with LF line endings.
pub fn write_csv<I, R>(path: &Path, header: &[&str], records: I) -> std::io::Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let file = std::fs::File::create(path)?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(std::io::BufWriter::new(file));
    w.write_record(header).map_err(std::io::Error::other)?;
    for r in records {
        w.write_record(r).map_err(std::io::Error::other)?;
    }
    w.into_inner().map_err(|e| e.into_error())?.flush()
}

pub fn write_results(path: &Path, hash: &str, rows: &[Row]) -> std::io::Result<()> {
    write_csv(
        path,
        &RESULT_HEADER,
        rows.iter().map(|r| {
            vec![
                hash.to_string(),
                r.instance.clone(),
                r.scope.clone(),
                r.metric.clone(),
                format_value(r.value),
                r.tolerance().map(format_value).unwrap_or_default(),
                r.pass().map(|p| p.to_string()).unwrap_or_default(),
            ]
        }),
    )
}
