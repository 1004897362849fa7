use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};

/// Training and evaluation events.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricEvent {
    PretrainStep {
        epoch: usize,
        step: usize,
        loss: f64,
        /// `(modality name, loss)` in model order.
        per_modality: Vec<(String, f64)>,
        seeds: Vec<u64>,
    },
    FinetuneStep {
        epoch: usize,
        step: usize,
        loss: f64,
        seeds: Vec<u64>,
    },
    Epoch {
        phase: String,
        epoch: usize,
        values: Vec<(String, f64)>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Strictly increasing across the whole log, resumes included.
    pub seq: u64,
    pub unix_ms: u64,
    pub elapsed_s: f64,
    #[serde(flatten)]
    pub event: MetricEvent,
}

/// Append-only JSON-lines log. Without a path it only keeps records in
/// memory.
#[derive(Debug)]
pub struct MetricsLog {
    path: Option<PathBuf>,
    records: Vec<MetricRecord>,
    start: Instant,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog {
            path: None,
            records: Vec::new(),
            start: Instant::now(),
        }
    }

    /// Opens `path`, keeping any records already in it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        if path.exists() {
            let f = std::fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| PipelineError::io(path, e))?;
                if !line.trim().is_empty() {
                    records.push(serde_json::from_str(&line).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?);
                }
            }
        }
        Ok(MetricsLog {
            path: Some(path.to_path_buf()),
            records,
            start: Instant::now(),
        })
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    /// Events without timing fields, for run-to-run comparison.
    pub fn events(&self) -> Vec<MetricEvent> {
        self.records.iter().map(|r| r.event.clone()).collect()
    }

    pub fn append(&mut self, event: MetricEvent) -> Result<()> {
        let rec = MetricRecord {
            seq: self.records.last().map_or(0, |r| r.seq + 1),
            unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64),
            elapsed_s: self.start.elapsed().as_secs_f64(),
            event,
        };
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| PipelineError::io(path, e))?;
            let mut line = serde_json::to_string(&rec).expect("record serializes");
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(|e| PipelineError::io(path, e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    /// Drops records after the given training position, so a resumed run
    /// does not duplicate steps logged after the checkpoint it resumes from.
    pub fn truncate_after_epoch(&mut self, phase: &str, completed_epochs: usize) -> Result<()> {
        let keep = self
            .records
            .iter()
            .position(|r| match &r.event {
                MetricEvent::PretrainStep { epoch, .. } => phase == "pretrain" && *epoch >= completed_epochs,
                MetricEvent::FinetuneStep { epoch, .. } => phase == "finetune" && *epoch >= completed_epochs,
                MetricEvent::Epoch { phase: p, epoch, .. } => p == phase && *epoch >= completed_epochs,
            })
            .unwrap_or(self.records.len());
        if keep == self.records.len() {
            return Ok(());
        }
        self.records.truncate(keep);
        if let Some(path) = &self.path {
            let mut out = String::new();
            for r in &self.records {
                out.push_str(&serde_json::to_string(r).expect("record serializes"));
                out.push('\n');
            }
            std::fs::write(path, out).map_err(|e| PipelineError::io(path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(epoch: usize, step: usize) -> MetricEvent {
        MetricEvent::FinetuneStep {
            epoch,
            step,
            loss: 0.5,
            seeds: vec![1, 2],
        }
    }

    #[test]
    fn sequence_is_monotone_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut log = MetricsLog::open(&p).unwrap();
        log.append(step(0, 0)).unwrap();
        log.append(step(0, 1)).unwrap();
        let mut again = MetricsLog::open(&p).unwrap();
        again.append(step(1, 2)).unwrap();
        let seqs: Vec<u64> = again.records().iter().map(|r| r.seq).collect();
        assert_eq!(seqs, vec![0, 1, 2]);
        assert!(again.records().iter().all(|r| r.unix_ms > 0));
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().contains("\"kind\":\"finetune_step\""));
    }

    #[test]
    fn truncation_for_resume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut log = MetricsLog::open(&p).unwrap();
        for e in 0..3 {
            log.append(step(e, e)).unwrap();
        }
        log.truncate_after_epoch("finetune", 1).unwrap();
        assert_eq!(log.records().len(), 1);
        assert_eq!(MetricsLog::open(&p).unwrap().records().len(), 1);
    }
}
