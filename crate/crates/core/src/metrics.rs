//! Per-step loss reports and the line-delimited metrics log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Named loss terms of one optimization step. Entries are the weighted
/// contributions that sum to `total`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: f64) {
        self.terms.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    /// Errors with the offending term's name on any non-finite value.
    pub fn validate_finite(&self) -> Result<()> {
        for (name, v) in &self.terms {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("loss term {name} is {v}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .terms
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::json!(v)))
            .collect();
        serde_json::Value::Object(map)
    }
}

/// Writes one JSON record per line. Key order is sorted, so logs from
/// identical runs are byte-identical.
pub struct MetricsWriter {
    out: Box<dyn Write>,
}

impl MetricsWriter {
    pub fn to_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::Persistence(format!("{}: {e}", path.display())))?;
        Ok(MetricsWriter {
            out: Box::new(std::io::BufWriter::new(f)),
        })
    }

    pub fn sink() -> Self {
        MetricsWriter {
            out: Box::new(std::io::sink()),
        }
    }

    pub fn write(&mut self, record: &serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)
            .map_err(|e| Error::Persistence(e.to_string()))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
