//! Line-oriented training metrics: one JSON record per iteration, fixed
//! field order, so files diff cleanly and reproduce byte-for-byte.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FpdError, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub iter: usize,
    pub total: f64,
    pub rpn_obj: f64,
    pub rpn_box: f64,
    pub roi_cls: f64,
    pub roi_box: f64,
    pub meta: f64,
}

pub struct MetricsWriter {
    writer: BufWriter<fs::File>,
    path: PathBuf,
    rows: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            writer: BufWriter::new(fs::File::create(path)?),
            path: path.to_path_buf(),
            rows: 0,
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| FpdError::Format(format!("metrics record: {e}")))?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.rows += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(PathBuf, usize)> {
        self.writer.flush()?;
        Ok((self.path, self.rows))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let body = fs::read_to_string(path)?;
    body.lines()
        .map(|l| {
            serde_json::from_str(l).map_err(|e| FpdError::Format(format!("metrics line: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writer_roundtrip_and_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        for i in 0..3 {
            w.append(&MetricsRecord {
                iter: i,
                total: i as f64 * 0.5,
                rpn_obj: 0.1,
                rpn_box: 0.2,
                roi_cls: 0.3,
                roi_box: 0.0,
                meta: 0.4,
            })
            .unwrap();
        }
        let (p, rows) = w.finish().unwrap();
        assert_eq!(rows, 3);
        let records = read_metrics(&p).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[2].iter, 2);
    }
}
