//! Step logs: one CSV record per optimization step, plus the collapse
//! predicate evaluated over a whole log.
//!
//! Floats are written with Rust's shortest round-trip formatting, so two
//! runs producing identical numerics produce byte-identical logs.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER: &str = "step,epoch,l_pred,l_cls,total,teacher_entropy,dominance,lr,lambda,zeta,tau_t";

/// Collapse predicate: teacher dominance above this for
/// [`COLLAPSE_WINDOW`] consecutive steps.
pub const COLLAPSE_DOMINANCE: f64 = 0.5;
pub const COLLAPSE_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub l_pred: f64,
    pub l_cls: f64,
    pub total: f64,
    pub teacher_entropy: f64,
    pub dominance: f64,
    pub lr: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub tau_t: f64,
}

impl StepRecord {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.l_pred,
            self.l_cls,
            self.total,
            self.teacher_entropy,
            self.dominance,
            self.lr,
            self.lambda,
            self.zeta,
            self.tau_t
        )
    }
}

/// Append-oriented step log writer.
pub struct StepLogWriter {
    file: std::fs::File,
}

impl StepLogWriter {
    /// Create a fresh log with header, truncating any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(StepLogWriter { file })
    }

    /// Open an existing log for appending (resume path).
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(StepLogWriter { file })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        writeln!(self.file, "{}", rec.to_csv_line())
            .map_err(|e| Error::StepLog(format!("write failed: {e}")))
    }
}

/// Parse a step log. Strict: header must match, every field must parse.
pub fn parse(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::StepLog("empty log".into()))?;
    if header.trim_end_matches('\r') != HEADER {
        return Err(Error::StepLog(format!("unexpected header {header:?}")));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::StepLog(format!(
                "line {}: expected 11 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let int = |s: &str, what: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::StepLog(format!("line {}: bad {what} `{s}`", i + 2)))
        };
        let num = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| Error::StepLog(format!("line {}: bad {what} `{s}`", i + 2)))?;
            if v.is_nan() {
                return Err(Error::StepLog(format!("line {}: NaN {what}", i + 2)));
            }
            Ok(v)
        };
        records.push(StepRecord {
            step: int(fields[0], "step")?,
            epoch: int(fields[1], "epoch")?,
            l_pred: num(fields[2], "l_pred")?,
            l_cls: num(fields[3], "l_cls")?,
            total: num(fields[4], "total")?,
            teacher_entropy: num(fields[5], "teacher_entropy")?,
            dominance: num(fields[6], "dominance")?,
            lr: num(fields[7], "lr")?,
            lambda: num(fields[8], "lambda")?,
            zeta: num(fields[9], "zeta")?,
            tau_t: num(fields[10], "tau_t")?,
        });
    }
    Ok(records)
}

pub fn load(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

/// Result of scanning a log for sustained teacher-dominance collapse.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    pub collapsed: bool,
    /// First step at which the predicate held (dominance above threshold
    /// for `window` consecutive steps ending here).
    pub first_step: Option<u64>,
    pub max_run: usize,
    pub threshold: f64,
    pub window: usize,
}

/// Scan for `window` consecutive steps with dominance > `threshold`.
pub fn detect_collapse(records: &[StepRecord], threshold: f64, window: usize) -> CollapseReport {
    let mut run = 0usize;
    let mut max_run = 0usize;
    let mut first_step = None;
    for rec in records {
        if rec.dominance > threshold {
            run += 1;
            if run > max_run {
                max_run = run;
            }
            if run == window && first_step.is_none() {
                first_step = Some(rec.step);
            }
        } else {
            run = 0;
        }
    }
    CollapseReport {
        collapsed: first_step.is_some(),
        first_step,
        max_run,
        threshold,
        window,
    }
}
