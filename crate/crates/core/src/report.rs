//! Diagnostics report and its CSV / JSON encodings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::LayerDiagnostics;
use crate::error::{LarvError, Result};
use crate::gates::TierThresholds;

pub const CSV_COLUMNS: [&str; 8] = ["layer", "e", "c", "r", "z_c", "w", "s", "tier"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// Guesses from the file extension; anything but `.json` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(LarvError::InvalidConfig(format!("unknown report format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load_s: f64,
    pub merge_s: f64,
    pub diagnostics_s: f64,
    pub per_layer_diagnostics_s: Vec<f64>,
    pub compose_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seed: u64,
    pub merger: String,
    pub gate: String,
    pub rescale: String,
    pub num_layers: usize,
    pub skipped: Vec<String>,
    pub thresholds: Option<TierThresholds>,
    pub timings: Timings,
}

/// Raw scores of one matrix view before group averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub layer: usize,
    /// Task index when each task delta is diagnosed separately.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<usize>,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub e: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub rows: Vec<LayerDiagnostics>,
    pub meta: ReportMeta,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub views: Vec<ViewScore>,
    /// Per-task rows when each task delta is rescaled separately; `rows` then holds task means.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_task: Vec<Vec<LayerDiagnostics>>,
}

impl DiagnosticsReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| LarvError::Report(e.to_string());
        w.write_record(CSV_COLUMNS).map_err(err)?;
        for row in &self.rows {
            w.write_record([
                row.layer.to_string(),
                row.e.to_string(),
                row.c.to_string(),
                row.r.to_string(),
                row.z_c.to_string(),
                row.w.to_string(),
                row.s.to_string(),
                row.tier.map(|t| t.as_str().to_string()).unwrap_or_default(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| LarvError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| LarvError::Report(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| LarvError::Report(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LarvError::Report(e.to_string()))
    }
}

pub fn emit_report(report: &DiagnosticsReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Csv => report.to_csv()?,
        ReportFormat::Json => report.to_json()?,
    };
    std::fs::write(path, text).map_err(|e| LarvError::io(path, e))
}
