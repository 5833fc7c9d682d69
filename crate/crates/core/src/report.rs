//! Experiment records: JSON lines with full traces and a flat, timing-free
//! CSV summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamCounts;
use crate::train::TrainOutcome;

/// One trained model evaluated at one horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonResult {
    pub horizon: usize,
    pub seed: u64,
    pub test_mse: f64,
    pub test_mae: f64,
    pub params: ParamCounts,
    pub stages: Vec<TrainOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub results: Vec<HorizonResult>,
    pub avg_mse: f64,
    pub avg_mae: f64,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>, results: Vec<HorizonResult>) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::Data("report needs at least one result".into()));
        }
        let n = results.len() as f64;
        let avg_mse = results.iter().map(|r| r.test_mse).sum::<f64>() / n;
        let avg_mae = results.iter().map(|r| r.test_mae).sum::<f64>() / n;
        Ok(Self {
            name: name.into(),
            results,
            avg_mse,
            avg_mae,
        })
    }

    /// One JSON record per horizon/seed.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.results {
            serde_json::to_writer(&mut w, &(&self.name, r))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows = vec![vec![
            "name".to_string(),
            "horizon".into(),
            "seed".into(),
            "mse".into(),
            "mae".into(),
            "best_epoch".into(),
            "params_total".into(),
        ]];
        for r in &self.results {
            let best = r.stages.last().map_or(0, |s| s.best_epoch);
            rows.push(vec![
                self.name.clone(),
                r.horizon.to_string(),
                r.seed.to_string(),
                r.test_mse.to_string(),
                r.test_mae.to_string(),
                best.to_string(),
                r.params.total.to_string(),
            ]);
        }
        rows.push(vec![
            self.name.clone(),
            "avg".into(),
            String::new(),
            self.avg_mse.to_string(),
            self.avg_mae.to_string(),
            String::new(),
            String::new(),
        ]);
        write_csv(path, &rows)
    }
}

/// Writes string rows with the csv crate; the first row is the header.
pub fn write_csv(path: impl AsRef<Path>, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(h: usize, mse: f64, mae: f64) -> HorizonResult {
        HorizonResult {
            horizon: h,
            seed: 0,
            test_mse: mse,
            test_mae: mae,
            params: ParamCounts {
                in_projector: 1,
                encoder_cd: 2,
                encoder_td: 3,
                out_projector: 4,
                total: 10,
                pretrain_heads: 0,
            },
            stages: Vec::new(),
        }
    }

    #[test]
    fn averages_and_files() {
        let r = ExperimentReport::new("x", vec![result(96, 0.2, 0.3), result(192, 0.4, 0.5)]).unwrap();
        assert!((r.avg_mse - 0.3).abs() < 1e-15);
        assert!((r.avg_mae - 0.4).abs() < 1e-15);
        let dir = tempfile::tempdir().unwrap();
        r.write_jsonl(dir.path().join("r.jsonl")).unwrap();
        r.write_summary_csv(dir.path().join("s.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 2);
        let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(ExperimentReport::new("x", vec![]).is_err());
    }
}
