//! Per-step metrics as CSV.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::schedule::StepReport;

pub const HEADER: &str = "step,beta,itc,itm,mlm,prefix,ptm,total,u,s,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub beta: f64,
    pub losses: [f64; 5],
    pub total: f64,
    pub u: usize,
    pub s: usize,
    pub wall_ms: f64,
}

impl From<&StepReport> for MetricsRow {
    fn from(r: &StepReport) -> Self {
        Self {
            step: r.step,
            beta: r.beta,
            losses: r.losses.parts(),
            total: r.losses.total,
            u: r.kept,
            s: r.seeds,
            wall_ms: r.wall_ms,
        }
    }
}

impl MetricsRow {
    /// Floats print with Rust's shortest round-trip form, so equal values
    /// give equal text.
    pub fn to_csv(&self) -> String {
        let l = self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.step, self.beta, l[0], l[1], l[2], l[3], l[4], self.total, self.u, self.s, self.wall_ms
        )
    }

    /// The row without its wall-clock column, for reproducibility checks.
    pub fn deterministic_part(&self) -> String {
        let csv = self.to_csv();
        csv[..csv.rfind(',').unwrap_or(csv.len())].to_string()
    }
}

/// Append-only CSV with the header written once at creation.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    /// Continues an existing file, writing the header only if it is empty.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let empty = file.metadata()?.len() == 0;
        let mut out = BufWriter::new(file);
        if empty {
            writeln!(out, "{HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        self.out.flush()?;
        Ok(())
    }
}
