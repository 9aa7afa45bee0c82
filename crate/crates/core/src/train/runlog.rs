use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, DtsError, Result};
use crate::metrics::MetricsReport;
use crate::train::StepLosses;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub losses: StepLosses,
    /// Seconds since the start of training.
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    /// Number of optimizer steps taken so far.
    pub step: usize,
    pub wall_secs: f64,
    pub report: MetricsReport,
}

/// One line of a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

/// Line-delimited JSON log kept in memory and, optionally, appended to a file.
pub struct RunLog {
    records: Vec<LogRecord>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            sink: None,
        }
    }

    /// Truncates `path` and writes every record to it as it arrives.
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| DtsError::io(parent, e))?;
        }
        let f = File::create(path).map_err(|e| DtsError::io(path, e))?;
        Ok(Self {
            records: Vec::new(),
            sink: Some((path.to_path_buf(), BufWriter::new(f))),
        })
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let (LogRecord::Step(new), Some(LogRecord::Step(last))) = (&record, self.last_step()) {
            if new.step <= last.step {
                return Err(contract_err!(
                    "step {} logged after step {}",
                    new.step,
                    last.step
                ));
            }
        }
        if let Some((path, w)) = &mut self.sink {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")
                .and_then(|_| w.flush())
                .map_err(|e| DtsError::io(&*path, e))?;
        }
        self.records.push(record);
        Ok(())
    }

    fn last_step(&self) -> Option<&LogRecord> {
        self.records
            .iter()
            .rev()
            .find(|r| matches!(r, LogRecord::Step(_)))
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<LogRecord> {
        self.records
    }
}

pub fn read_runlog(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| DtsError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// The per-step losses of a log, in order.
pub fn loss_sequence(records: &[LogRecord]) -> Vec<StepLosses> {
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step(s) => Some(s.losses),
            LogRecord::Eval(_) => None,
        })
        .collect()
}
