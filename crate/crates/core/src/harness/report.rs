use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One evaluated cell: a method on one channel model at one network size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub channel_model: String,
    pub aps: usize,
    pub users: usize,
    /// OAU iterations, for adapted rows.
    pub h: Option<usize>,
    pub mean_sum_rate: f64,
    pub std_sum_rate: f64,
    pub mean_wall_s: f64,
    pub samples: usize,
    pub seed: u64,
}

impl ResultRow {
    /// Row with the timing column zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> ResultRow {
        ResultRow {
            mean_wall_s: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::arg(format!("unknown report format {other:?} (csv|json)"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

pub fn render_report(rows: &[ResultRow], format: ReportFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::arg("report needs at least one row"));
    }
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(rows)? + "\n"),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r).map_err(|e| Error::Persistence(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Persistence(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Persistence(e.to_string()))
        }
    }
}

pub fn parse_report(text: &str, format: ReportFormat) -> Result<Vec<ResultRow>> {
    match format {
        ReportFormat::Json => Ok(serde_json::from_str(text)?),
        ReportFormat::Csv => csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<std::result::Result<Vec<ResultRow>, _>>()
            .map_err(|e| Error::Persistence(e.to_string())),
    }
}

/// Writes `rows` to `path` in the given format.
pub fn emit_report(rows: &[ResultRow], format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(rows, format)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}
