use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricPair;
use crate::model::{EpochMetrics, ModelKind};
use crate::quantizer::EpochTrace;

use super::config::{RunConfig, Variant};
use super::memory::MemoryAccount;

pub const REPORT_SCHEMA: &str = "mec-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSize {
    pub name: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub provenance: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub fields: Vec<FieldSize>,
    pub total_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub model: ModelKind,
    pub n_params: usize,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub val: MetricPair,
    pub test: MetricPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSummary {
    pub trace: Vec<EpochTrace>,
    /// Mean entropy (nats) of the popularity-weighted hard code distribution.
    pub weighted_code_entropy: f64,
    /// Codewords no feature maps to in the final assignment table.
    pub empty_codewords: usize,
}

/// Wall-clock measurements; excluded from reproducibility comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Timing {
    pub stage1_seconds: f64,
    pub quantizer_seconds: f64,
    pub stage2_seconds: f64,
    pub stage1_epoch_seconds: Vec<f64>,
    pub stage2_epoch_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub variant: Variant,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset: DatasetSummary,
    pub stage1: StageSummary,
    pub quantizer: Option<QuantizerSummary>,
    pub stage2: StageSummary,
    pub memory: MemoryAccount,
    pub timing: Option<Timing>,
}

fn check_metrics(stage: &str, s: &StageSummary) -> Result<()> {
    for (name, m) in [("val", &s.val), ("test", &s.test)] {
        if !(0.0..=1.0).contains(&m.auc) || !(m.logloss >= 0.0) || !m.logloss.is_finite() {
            return Err(Error::InvalidInput(format!("{stage} {name} metrics out of range: {m:?}")));
        }
    }
    if s.best_epoch >= s.history.len().max(1) {
        return Err(Error::InvalidInput(format!("{stage} best epoch outside its history")));
    }
    Ok(())
}

impl RunReport {
    /// Checks the schema tag and the value ranges every report must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.schema != REPORT_SCHEMA {
            return Err(Error::VersionMismatch {
                what: "report",
                found: self.schema.clone(),
            });
        }
        check_metrics("stage1", &self.stage1)?;
        check_metrics("stage2", &self.stage2)?;
        if self.variant.is_quantized() != self.quantizer.is_some() {
            return Err(Error::InvalidInput(format!(
                "variant {} inconsistent with the quantizer section",
                self.variant.name()
            )));
        }
        let m = &self.memory;
        if !(m.compression_ratio > 0.0) || !m.compression_ratio.is_finite() {
            return Err(Error::InvalidInput("compression ratio must be positive".into()));
        }
        if !self.variant.is_quantized() && m.compression_ratio != 1.0 {
            return Err(Error::InvalidInput("dense reports must have compression ratio 1".into()));
        }
        if let Some(q) = &self.quantizer {
            if q.trace.iter().any(|t| {
                let l = t.loss;
                [l.recon, l.reg, l.con, l.total].iter().any(|v| !v.is_finite() || *v < 0.0)
            }) {
                return Err(Error::InvalidInput("quantizer trace holds invalid losses".into()));
            }
        }
        Ok(())
    }

    /// The report with wall-clock fields removed.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: None,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize") + "\n"
    }

    /// JSON of [`Self::without_timing`]; identical configs give identical bytes.
    pub fn deterministic_json(&self) -> String {
        self.without_timing().to_json()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(REPORT_SCHEMA) => {}
            Some(other) => {
                return Err(Error::VersionMismatch {
                    what: "report",
                    found: other.to_string(),
                })
            }
            None => return Err(Error::InvalidInput("report has no schema field".into())),
        }
        let report: RunReport = serde_json::from_value(value)?;
        report.validate()?;
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
