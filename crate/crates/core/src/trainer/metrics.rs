//! Append-only per-step training metrics with a CSV interchange form.

use std::io::{self, BufRead, Write};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: usize,
    pub resolution: usize,
    pub text_ce: f64,
    pub flow_mse: f64,
    pub lr: f64,
    pub dropout_p: f64,
    /// Measured time; excluded from determinism comparisons.
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    records: Vec<MetricRecord>,
}

pub const CSV_HEADER: &str = "step,stage,resolution,text_ce,flow_mse,lr,dropout_p,wall_ms";

impl MetricLog {
    pub fn new() -> Self {
        MetricLog::default()
    }

    pub fn push(&mut self, r: MetricRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(Error::Contract(format!(
                    "metric steps must increase: {} after {}",
                    r.step, last.step
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Equality on everything a seeded run determines; wall-clock time is
    /// measurement, not state.
    pub fn same_trajectory(&self, other: &MetricLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                (a.step, a.stage, a.resolution) == (b.step, b.stage, b.resolution)
                    && a.text_ce == b.text_ce
                    && a.flow_mse == b.flow_mse
                    && a.lr == b.lr
                    && a.dropout_p == b.dropout_p
            })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.step, r.stage, r.resolution, r.text_ce, r.flow_mse, r.lr, r.dropout_p, r.wall_ms
            )?;
        }
        Ok(())
    }

    /// Reads a metrics file. Lines starting with `#` before the header
    /// are run annotations (seed overrides and the like) and are skipped.
    pub fn read_csv<R: io::Read>(r: R) -> Result<MetricLog> {
        let mut lines = io::BufReader::new(r).lines().enumerate();
        loop {
            match lines.next() {
                Some((_, Ok(h))) if h.trim_start().starts_with('#') => continue,
                Some((_, Ok(h))) if h.trim() == CSV_HEADER => break,
                Some((i, Ok(h))) => {
                    return Err(Error::Parse { pos: i + 1, msg: format!("unexpected header {h:?}") })
                }
                Some((_, Err(e))) => return Err(e.into()),
                None => return Err(Error::Parse { pos: 1, msg: "empty metrics file".into() }),
            }
        }
        let mut log = MetricLog::new();
        for (i, line) in lines {
            let pos = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Parse { pos, msg: format!("expected 8 columns, got {}", f.len()) });
            }
            let field = |k: usize| -> Result<f64> {
                f[k].parse::<f64>()
                    .map_err(|e| Error::Parse { pos, msg: format!("column {k}: {e}") })
            };
            let int = |k: usize| -> Result<usize> {
                f[k].parse::<usize>()
                    .map_err(|e| Error::Parse { pos, msg: format!("column {k}: {e}") })
            };
            log.push(MetricRecord {
                step: int(0)?,
                stage: int(1)?,
                resolution: int(2)?,
                text_ce: field(3)?,
                flow_mse: field(4)?,
                lr: field(5)?,
                dropout_p: field(6)?,
                wall_ms: field(7)?,
            })?;
        }
        Ok(log)
    }
}
