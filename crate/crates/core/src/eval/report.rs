use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metric {
    pub name: String,
    /// Domain the metric is restricted to, or `all`.
    pub domain: String,
    pub value: f64,
}

/// Every metric of one evaluated checkpoint, keyed for reproduction by
/// the run seed and the configuration hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub metrics: Vec<Metric>,
    pub seed: u64,
    /// Seeds of the probe heads averaged into the probe metrics.
    pub probe_seeds: Vec<u64>,
    pub config_hash: String,
    /// Free-form notes such as the alignment metric variant.
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            metrics: Vec::new(),
            seed,
            probe_seeds: Vec::new(),
            config_hash: config_hash.into(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, name: &str, domain: &str, value: f64) {
        self.metrics.push(Metric {
            name: name.to_string(),
            domain: domain.to_string(),
            value,
        });
    }

    pub fn get(&self, name: &str, domain: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.name == name && m.domain == domain)
            .map(|m| m.value)
    }

    /// All metrics are rates, so each must be finite and in `[0, 1]`, and
    /// `(name, domain)` pairs must be unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.metrics {
            if !(0.0..=1.0).contains(&m.value) {
                return Err(Error::InvalidArgument(format!(
                    "metric {}/{} = {} is outside [0, 1]",
                    m.name, m.domain, m.value
                )));
            }
            if !seen.insert((m.name.as_str(), m.domain.as_str())) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate metric {}/{}",
                    m.name, m.domain
                )));
            }
        }
        Ok(())
    }

    /// Writes `report.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        std::fs::write(dir.join("metrics.csv"), self.to_csv()?)?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        w.write_record(["name", "domain", "value", "seed", "config_hash"])
            .map_err(csv_err)?;
        for m in &self.metrics {
            w.write_record([
                m.name.as_str(),
                m.domain.as_str(),
                &m.value.to_string(),
                &self.seed.to_string(),
                self.config_hash.as_str(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let report: Self = serde_json::from_slice(&std::fs::read(dir.join("report.json"))?)?;
        report.validate()?;
        Ok(report)
    }
}
