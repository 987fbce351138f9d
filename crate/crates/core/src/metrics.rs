//! The metrics stream: one JSON record per line, flushed as it is written so
//! the file can be read while a run is still going.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::RoundRecord;
use crate::partition::PartitionStats;
use crate::retrieval::RecallReport;

/// Which study variant and seed a record belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunKey {
    pub study: String,
    pub variant: String,
    pub variant_index: usize,
    pub seed: u64,
}

/// Everything worth keeping about a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub key: RunKey,
    pub mode: String,
    pub partition: PartitionStats,
    pub train_clients: usize,
    pub validation_clients: usize,
    /// Recall of the untrained initial model.
    pub initial: RecallReport,
    /// Recall of the parameters after the last round.
    #[serde(rename = "final")]
    pub final_recall: RecallReport,
    pub best_round: Option<usize>,
    pub best_score: Option<f64>,
    pub final_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricRecord {
    Round {
        key: RunKey,
        record: RoundRecord,
    },
    Summary(RunSummary),
}

/// Append-only writer of metric records.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    /// Starts a fresh metrics file, truncating any previous one.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path)?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    /// Continues an existing metrics file.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, record: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Reads every complete record. A trailing line without a newline is a
/// record still being written and is skipped when it does not parse.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut line = String::new();
    let mut number = 0;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        number += 1;
        let complete = line.ends_with('\n');
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line.trim_end()) {
            Ok(r) => records.push(r),
            Err(_) if !complete => break,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: number,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(records)
}

/// The run summaries among `records`, in file order.
pub fn summaries(records: &[MetricRecord]) -> Vec<&RunSummary> {
    records
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Summary(s) => Some(s),
            MetricRecord::Round { .. } => None,
        })
        .collect()
}
