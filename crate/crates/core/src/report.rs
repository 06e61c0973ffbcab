//! Machine-readable run reports.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::{HwConfig, Program};
use crate::error::{Error, Result};
use crate::perf::CycleReport;
use crate::quant::QTensor;
use crate::signal::{Class, Diagnosis, RecordingResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Tensor,
    Diagnose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Votes {
    pub va: usize,
    pub non_va: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub verdict: Class,
    pub votes: Votes,
    pub per_recording: Vec<RecordingResult>,
    /// Simulated cycles over all recordings of the diagnosis.
    pub cycles: u64,
    pub latency_s: f64,
    pub gops: f64,
    pub raw_gops: f64,
}

impl DiagnosisReport {
    pub fn new(d: &Diagnosis, per_inference: &CycleReport) -> Self {
        let n = d.per_recording.len() as u64;
        DiagnosisReport {
            verdict: d.verdict,
            votes: Votes {
                va: d.votes_va,
                non_va: d.votes_nonva,
            },
            per_recording: d.per_recording.clone(),
            cycles: per_inference.total_cycles * n,
            latency_s: per_inference.latency_s * n as f64,
            gops: per_inference.effective_gops,
            raw_gops: per_inference.raw_gops,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub tool_version: String,
    pub hw: HwConfig,
    pub model_hash: String,
    pub mode: RunMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<QTensor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnoses: Vec<DiagnosisReport>,
    /// Cycle accounting of a single inference.
    pub perf: CycleReport,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<RunReport> {
        serde_json::from_str(s)
            .map_err(|e| Error::format(format!("line {} column {}", e.line(), e.column()), e.to_string()))
    }
}

/// Lowercase hex SHA-256 of the program's binary form.
pub fn model_hash(prog: &Program) -> String {
    Sha256::digest(prog.to_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
