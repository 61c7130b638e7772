//! Loading, validating, and filtering raw incident exports, plus persistence
//! of the structured records produced by the extraction pipeline.
//!
//! Input CSV columns (exact, case-sensitive):
//! `record_id,year,state,narrative,age,gender,severity`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Component;
use crate::codebook::{CauseType, PredictorVector};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("input is missing required column(s): {0:?}")]
    Schema(Vec<String>),
    #[error("all {attempted} data rows were rejected; see the rejects report")]
    AllRowsRejected { attempted: usize },
    #[error("{path}:{line}: malformed structured record: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One raw narrative record as exported from the incident database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidentReport {
    pub record_id: String,
    pub year: i32,
    #[serde(default)]
    pub state: String,
    #[serde(default)]
    pub narrative: String,
    #[serde(rename = "age")]
    pub age_years: Option<u32>,
    #[serde(rename = "gender", default)]
    pub gender_raw: String,
    #[serde(rename = "severity")]
    pub severity_code: i32,
}

/// The fully extracted record written to the structured JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredIncident {
    pub record_id: String,
    pub is_ebike: bool,
    pub modes_count: u32,
    pub time_raw: Option<String>,
    pub weather_raw: Option<String>,
    pub road_raw: Option<String>,
    pub cause_raw: Option<String>,
    pub cause_type: Option<CauseType>,
    pub components_related: Vec<Component>,
    pub components_caused: Vec<Component>,
    pub predictors: Option<PredictorVector>,
    #[serde(default)]
    pub error: Option<String>,
}

impl StructuredIncident {
    /// Empty record for a report the classifier labeled "no" (or failed on).
    pub fn empty(record_id: &str) -> Self {
        Self {
            record_id: record_id.to_string(),
            is_ebike: false,
            modes_count: 0,
            time_raw: None,
            weather_raw: None,
            road_raw: None,
            cause_raw: None,
            cause_type: None,
            components_related: Vec::new(),
            components_caused: Vec::new(),
            predictors: None,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRow {
    pub record_id: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct LoadOutcome {
    pub reports: Vec<IncidentReport>,
    /// Rejected rows plus kept-but-flagged rows (e.g. implausible ages).
    pub rejects: Vec<RejectedRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl InputFormat {
    /// Pick a format from the file extension; defaults to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") | Some("json") => InputFormat::Jsonl,
            _ => InputFormat::Csv,
        }
    }
}

const REQUIRED_COLUMNS: [&str; 7] = [
    "record_id",
    "year",
    "state",
    "narrative",
    "age",
    "gender",
    "severity",
];

/// Bounds outside which an age is kept but flagged in the rejects report.
const PLAUSIBLE_AGE: std::ops::RangeInclusive<u32> = 0..=120;

/// Load raw incident reports in file order. Malformed rows go to the rejects
/// report; the load only fails when nothing at all survives.
pub fn load_reports(path: &Path, format: InputFormat) -> Result<LoadOutcome, IngestError> {
    match format {
        InputFormat::Csv => load_csv(path),
        InputFormat::Jsonl => load_jsonl(path),
    }
}

struct RowGuard {
    seen_ids: std::collections::HashSet<String>,
}

impl RowGuard {
    fn new() -> Self {
        Self {
            seen_ids: std::collections::HashSet::new(),
        }
    }

    /// Validate one parsed row; pushes flags/rejects, returns the report to keep.
    fn admit(&mut self, report: IncidentReport, out: &mut LoadOutcome) -> Option<IncidentReport> {
        if report.record_id.is_empty() {
            out.rejects.push(RejectedRow {
                record_id: String::new(),
                reason: "empty record_id".into(),
            });
            return None;
        }
        if !self.seen_ids.insert(report.record_id.clone()) {
            out.rejects.push(RejectedRow {
                record_id: report.record_id.clone(),
                reason: "duplicate record_id".into(),
            });
            return None;
        }
        if report.severity_code != -1 && !(1..=8).contains(&report.severity_code) {
            out.rejects.push(RejectedRow {
                record_id: report.record_id.clone(),
                reason: format!("severity {} outside -1 or 1..=8", report.severity_code),
            });
            return None;
        }
        if let Some(age) = report.age_years {
            if !PLAUSIBLE_AGE.contains(&age) {
                out.rejects.push(RejectedRow {
                    record_id: report.record_id.clone(),
                    reason: format!("age {age} outside 0..=120 (row kept)"),
                });
            }
        }
        Some(report)
    }
}

fn load_csv(path: &Path) -> Result<LoadOutcome, IngestError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| IngestError::Csv {
            path: path.display().to_string(),
            source: e,
        })?
        .clone();
    let mut col = std::collections::HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        col.entry(h.to_string()).or_insert(i);
    }
    let missing: Vec<String> = REQUIRED_COLUMNS
        .iter()
        .filter(|c| !col.contains_key(**c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(IngestError::Schema(missing));
    }

    let mut out = LoadOutcome::default();
    let mut guard = RowGuard::new();
    let mut attempted = 0usize;
    for (line_no, row) in reader.records().enumerate() {
        attempted += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.rejects.push(RejectedRow {
                    record_id: format!("row {}", line_no + 2),
                    reason: format!("unparseable csv row: {e}"),
                });
                continue;
            }
        };
        let field = |name: &str| row.get(col[name]).unwrap_or("").trim().to_string();
        let record_id = field("record_id");
        let reject = |out: &mut LoadOutcome, reason: String| {
            out.rejects.push(RejectedRow {
                record_id: record_id.clone(),
                reason,
            });
        };
        let year = match field("year").parse::<i32>() {
            Ok(y) => y,
            Err(_) => {
                reject(&mut out, format!("invalid year '{}'", field("year")));
                continue;
            }
        };
        let age_field = field("age");
        let age_years = if age_field.is_empty() {
            None
        } else {
            match age_field.parse::<u32>() {
                Ok(a) => Some(a),
                Err(_) => {
                    reject(&mut out, format!("invalid age '{age_field}'"));
                    continue;
                }
            }
        };
        let severity_code = match field("severity").parse::<i32>() {
            Ok(s) => s,
            Err(_) => {
                reject(
                    &mut out,
                    format!("invalid severity '{}'", field("severity")),
                );
                continue;
            }
        };
        let report = IncidentReport {
            record_id,
            year,
            state: field("state"),
            narrative: field("narrative"),
            age_years,
            gender_raw: field("gender"),
            severity_code,
        };
        if let Some(r) = guard.admit(report, &mut out) {
            out.reports.push(r);
        }
    }
    if attempted > 0 && out.reports.is_empty() {
        return Err(IngestError::AllRowsRejected { attempted });
    }
    Ok(out)
}

fn load_jsonl(path: &Path) -> Result<LoadOutcome, IngestError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = LoadOutcome::default();
    let mut guard = RowGuard::new();
    let mut attempted = 0usize;
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        attempted += 1;
        match serde_json::from_str::<IncidentReport>(&line) {
            Ok(report) => {
                if let Some(r) = guard.admit(report, &mut out) {
                    out.reports.push(r);
                }
            }
            Err(e) => out.rejects.push(RejectedRow {
                record_id: format!("line {}", line_no + 1),
                reason: format!("unparseable json: {e}"),
            }),
        }
    }
    if attempted > 0 && out.reports.is_empty() {
        return Err(IngestError::AllRowsRejected { attempted });
    }
    Ok(out)
}

/// Counts of records dropped by each modeling filter rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FilterSummary {
    pub input: usize,
    pub kept: usize,
    pub dropped_undefined_severity: usize,
    pub dropped_unspecified_gender: usize,
}

/// Drop records unusable for modeling: undefined severity always, genders
/// outside Female/Male when asked. Order is preserved, inputs untouched.
pub fn filter_for_model(
    reports: &[IncidentReport],
    drop_unspecified_gender: bool,
) -> (Vec<IncidentReport>, FilterSummary) {
    let mut summary = FilterSummary {
        input: reports.len(),
        ..FilterSummary::default()
    };
    let mut kept = Vec::new();
    for r in reports {
        if r.severity_code == -1 {
            summary.dropped_undefined_severity += 1;
            continue;
        }
        if drop_unspecified_gender && crate::codebook::code_gender(&r.gender_raw).is_none() {
            summary.dropped_unspecified_gender += 1;
            continue;
        }
        kept.push(r.clone());
    }
    summary.kept = kept.len();
    (kept, summary)
}

/// Write structured records as JSONL, one object per line. Returns the count
/// written.
pub fn write_structured(records: &[StructuredIncident], path: &Path) -> Result<usize, IngestError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("structured record serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(records.len())
}

/// Read back a structured JSONL file; malformed lines are fatal here since
/// the file is this tool's own output format.
pub fn load_structured(path: &Path) -> Result<Vec<StructuredIncident>, IngestError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str::<StructuredIncident>(&line).map_err(|e| {
            IngestError::Malformed {
                path: path.display().to_string(),
                line: line_no + 1,
                msg: e.to_string(),
            }
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Write the rejects report: CSV `record_id,reason`.
pub fn write_rejects(rejects: &[RejectedRow], path: &Path) -> Result<(), IngestError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["record_id", "reason"])
        .map_err(|e| IngestError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
    for r in rejects {
        w.write_record([&r.record_id, &r.reason])
            .map_err(|e| IngestError::Csv {
                path: path.display().to_string(),
                source: e,
            })?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Write raw reports back out as CSV with the canonical column set.
pub fn write_reports_csv(reports: &[IncidentReport], path: &Path) -> Result<(), IngestError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(REQUIRED_COLUMNS)
        .map_err(|e| IngestError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
    for r in reports {
        w.write_record([
            r.record_id.as_str(),
            &r.year.to_string(),
            r.state.as_str(),
            r.narrative.as_str(),
            &r.age_years.map(|a| a.to_string()).unwrap_or_default(),
            r.gender_raw.as_str(),
            &r.severity_code.to_string(),
        ])
        .map_err(|e| IngestError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}
