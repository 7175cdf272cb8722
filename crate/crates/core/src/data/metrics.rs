use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluation result, serialized as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub mode: String,
    #[serde(rename = "R")]
    pub r: usize,
    pub accuracy_all: f64,
    /// Accuracy on the examples that were not put in doubt; `None` when all were.
    pub accuracy_doubt: Option<f64>,
    pub num_classified: usize,
    pub density: f64,
    pub rho_per_layer: Vec<f64>,
    /// `None` for deterministic modes.
    pub seed: Option<u64>,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Metrics(format!("{name} = {v} outside [0, 1]")))
            }
        };
        if self.mode.is_empty() {
            return Err(Error::Metrics("empty mode".into()));
        }
        if self.r == 0 {
            return Err(Error::Metrics("R must be at least 1".into()));
        }
        if self.rho_per_layer.is_empty() {
            return Err(Error::Metrics("empty rho_per_layer".into()));
        }
        unit("accuracy_all", self.accuracy_all)?;
        if let Some(a) = self.accuracy_doubt {
            unit("accuracy_doubt", a)?;
        }
        unit("density", self.density)?;
        for &r in &self.rho_per_layer {
            unit("rho", r)?;
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: Self = serde_json::from_str(line)?;
        rec.validate()?;
        Ok(rec)
    }
}

/// Appends `record` as one newline-terminated JSON object.
pub fn write_metrics(record: &MetricsRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let line = record.to_json_line()?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRecord::from_json_line)
        .collect()
}
