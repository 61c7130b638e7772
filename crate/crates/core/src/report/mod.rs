//! Aggregates structured incidents into descriptive tables, renders the fit
//! report, and emits everything (CSV + SVG + manifest) deterministically.

pub mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{Component, ABSENT_SENTINEL};
use crate::codebook::{bin_age, code_gender, scan_causes, CauseLexicon, CauseType};
use crate::inference::LrTestResult;
use crate::ingest::{IncidentReport, StructuredIncident};
use crate::ordlogit::OrderedLogitFit;
use svg::{grouped_bar_svg, BarChart, BarGroup};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unknown report field '{0}'")]
    UnknownField(String),
}

/// Joined view of one incident used by every aggregation.
#[derive(Debug, Clone, Default)]
pub struct ReportRecord {
    pub record_id: String,
    pub is_ebike: bool,
    pub age_cat: Option<u8>,
    pub gender: Option<String>,
    pub cause_label: Option<String>,
    pub cause_type: Option<CauseType>,
    pub severity: Option<i32>,
    pub year: Option<i32>,
    pub state: String,
    pub components_related: Vec<Component>,
    pub components_caused: Vec<Component>,
}

impl ReportRecord {
    pub fn build(
        structured: &StructuredIncident,
        raw: Option<&IncidentReport>,
        lexicon: &CauseLexicon,
    ) -> Self {
        let cause_label = structured
            .cause_raw
            .as_deref()
            .filter(|c| *c != ABSENT_SENTINEL)
            .and_then(|c| scan_causes(c, lexicon).label)
            .map(|l| l.name().to_string());
        Self {
            record_id: structured.record_id.clone(),
            is_ebike: structured.is_ebike,
            age_cat: raw
                .and_then(|r| r.age_years)
                .and_then(|a| bin_age(i64::from(a)).ok()),
            gender: raw.and_then(|r| match code_gender(&r.gender_raw) {
                Some(1) => Some("Female".to_string()),
                Some(2) => Some("Male".to_string()),
                _ => None,
            }),
            cause_label,
            cause_type: structured.cause_type,
            severity: raw.and_then(|r| (r.severity_code != -1).then_some(r.severity_code)),
            year: raw.map(|r| r.year),
            state: raw.map(|r| r.state.clone()).unwrap_or_default(),
            components_related: structured.components_related.clone(),
            components_caused: structured.components_caused.clone(),
        }
    }

    fn age_group(&self) -> Option<&'static str> {
        match self.age_cat {
            Some(1) => Some("Children"),
            Some(2) => Some("Youth"),
            Some(3) => Some("Adults"),
            Some(4) => Some("Seniors"),
            _ => None,
        }
    }

    /// Named field lookup for grouping; `None` means the record lacks it.
    fn field(&self, name: &str) -> Result<Option<String>, ReportError> {
        match name {
            "age_group" => Ok(self.age_group().map(str::to_string)),
            "gender" => Ok(self.gender.clone()),
            "cause" => Ok(self.cause_label.clone()),
            "cause_type" => Ok(self.cause_type.map(|c| c.name().to_string())),
            "severity" => Ok(self.severity.map(|s| s.to_string())),
            "year" => Ok(self.year.map(|y| y.to_string())),
            "state" => Ok((!self.state.is_empty()).then(|| self.state.clone())),
            other => Err(ReportError::UnknownField(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupedCount {
    pub group_key: Vec<String>,
    pub item: String,
    pub count: usize,
}

/// Per group: items by descending count, ties broken by label, first k kept.
/// Records missing any of the named fields do not contribute.
pub fn top_k_by_group(
    records: &[ReportRecord],
    group_fields: &[&str],
    item_field: &str,
    k: usize,
) -> Result<Vec<GroupedCount>, ReportError> {
    let mut groups: BTreeMap<Vec<String>, BTreeMap<String, usize>> = BTreeMap::new();
    for record in records {
        let mut key = Vec::with_capacity(group_fields.len());
        let mut complete = true;
        for field in group_fields {
            match record.field(field)? {
                Some(v) => key.push(v),
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if !complete {
            continue;
        }
        let Some(item) = record.field(item_field)? else {
            continue;
        };
        *groups.entry(key).or_default().entry(item).or_insert(0) += 1;
    }
    let mut out = Vec::new();
    for (key, items) in groups {
        let mut ranked: Vec<(String, usize)> = items.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(k);
        out.extend(ranked.into_iter().map(|(item, count)| GroupedCount {
            group_key: key.clone(),
            item,
            count,
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CauseTypeDistribution {
    pub human: usize,
    pub equipment: usize,
    pub both: usize,
    pub unclear: usize,
}

impl CauseTypeDistribution {
    pub fn total(&self) -> usize {
        self.human + self.equipment + self.both + self.unclear
    }
}

/// Exhaustive partition of the records that carry a cause type.
pub fn cause_type_distribution(records: &[ReportRecord]) -> CauseTypeDistribution {
    let mut dist = CauseTypeDistribution::default();
    for r in records {
        match r.cause_type {
            Some(CauseType::HumanRelated) => dist.human += 1,
            Some(CauseType::EquipmentRelated) => dist.equipment += 1,
            Some(CauseType::Both) => dist.both += 1,
            Some(CauseType::Unclear) => dist.unclear += 1,
            None => {}
        }
    }
    dist
}

/// Per component: (related incidents, caused incidents), in component order.
pub fn component_link_counts(records: &[ReportRecord]) -> Vec<(Component, usize, usize)> {
    Component::ALL
        .iter()
        .map(|&c| {
            let related = records
                .iter()
                .filter(|r| r.components_related.contains(&c))
                .count();
            let caused = records
                .iter()
                .filter(|r| r.components_caused.contains(&c))
                .count();
            (c, related, caused)
        })
        .collect()
}

/// Both fitted models plus their comparison, ready for rendering.
pub struct FitBundle<'a> {
    pub full: &'a OrderedLogitFit,
    pub restricted: &'a OrderedLogitFit,
    pub lr: &'a LrTestResult,
    pub alpha: f64,
    /// "numeric" (one coefficient per coded variable) or "dummy".
    pub coding: &'a str,
}

#[derive(Debug, Serialize)]
struct CoefficientRow {
    name: String,
    estimate: f64,
    std_error: Option<f64>,
    z: Option<f64>,
    p_value: Option<f64>,
    significance: String,
    separation: bool,
    unreliable_se: bool,
}

#[derive(Debug, Serialize)]
struct ModelReport {
    name: String,
    coding: String,
    n: usize,
    n_categories: usize,
    param_count: usize,
    coefficients: Vec<CoefficientRow>,
    thresholds: Vec<CoefficientRow>,
    ll_null: f64,
    ll_model: f64,
    pseudo_r2: f64,
    aic: f64,
    bic: f64,
    converged: bool,
    iterations: usize,
    warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
struct FitReportJson<'a> {
    full: ModelReport,
    restricted: ModelReport,
    lr_test: &'a LrTestResult,
    alpha: f64,
}

fn significance(p: Option<f64>) -> String {
    match p {
        Some(p) if p < 0.01 => "***".to_string(),
        Some(p) if p < 0.05 => "**".to_string(),
        _ => String::new(),
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn model_report(fit: &OrderedLogitFit, name: &str, coding: &str) -> ModelReport {
    let k1 = fit.theta.len();
    let row = |i: usize, name: String, estimate: f64| CoefficientRow {
        name,
        estimate,
        std_error: finite(fit.se[i]),
        z: finite(fit.z[i]),
        p_value: finite(fit.p_values[i]),
        significance: significance(finite(fit.p_values[i])),
        separation: fit.separation[i],
        unreliable_se: fit.unreliable_se[i],
    };
    let coefficients = fit
        .covariate_names
        .iter()
        .enumerate()
        .map(|(j, n)| row(k1 + j, n.clone(), fit.beta[j]))
        .collect();
    let thresholds = (0..k1)
        .map(|j| row(j, format!("threshold_{}", j + 1), fit.theta[j]))
        .collect();
    let (aic, bic) = fit.information_criteria();
    ModelReport {
        name: name.to_string(),
        coding: coding.to_string(),
        n: fit.n,
        n_categories: fit.n_categories,
        param_count: fit.param_count(),
        coefficients,
        thresholds,
        ll_null: fit.ll_null,
        ll_model: fit.ll_model,
        pseudo_r2: fit.pseudo_r2(),
        aic,
        bic,
        converged: fit.converged,
        iterations: fit.iterations,
        warnings: fit.warnings.clone(),
    }
}

fn render_rows(out: &mut String, rows: &[CoefficientRow]) {
    for r in rows {
        let se = r
            .std_error
            .map(|v| format!("{v:10.3}"))
            .unwrap_or_else(|| format!("{:>10}", "—"));
        let p = r
            .p_value
            .map(|v| format!("{v:8.3}"))
            .unwrap_or_else(|| format!("{:>8}", "—"));
        let mut flags = String::new();
        if r.separation {
            flags.push_str(" [separation]");
        }
        if r.unreliable_se {
            flags.push_str(" [unreliable se]");
        }
        out.push_str(&format!(
            "  {:<24}{:10.3}{se}{p}  {:<3}{flags}\n",
            r.name, r.estimate, r.significance
        ));
    }
}

fn render_model_text(out: &mut String, m: &ModelReport) {
    out.push_str(&format!(
        "{} model ({} coding): n = {}, outcome categories = {}, parameters = {}\n",
        m.name, m.coding, m.n, m.n_categories, m.param_count
    ));
    out.push_str(&format!(
        "  {:<24}{:>10}{:>10}{:>8}  sig\n",
        "coefficient", "estimate", "std.err", "p"
    ));
    render_rows(out, &m.coefficients);
    render_rows(out, &m.thresholds);
    out.push_str(&format!(
        "  ll(null) {:.3}   ll(model) {:.3}   pseudo-R2 {:.3}\n",
        m.ll_null, m.ll_model, m.pseudo_r2
    ));
    out.push_str(&format!("  AIC {:.3}   BIC {:.3}\n", m.aic, m.bic));
    out.push_str(&format!(
        "  {} after {} iteration(s)\n",
        if m.converged {
            "converged"
        } else {
            "NOT converged"
        },
        m.iterations
    ));
    for w in &m.warnings {
        out.push_str(&format!("  warning: {w}\n"));
    }
}

/// Plain-text fit report: coefficients, thresholds, fit statistics, and the
/// likelihood-ratio block. Significance: ** p<0.05, *** p<0.01.
pub fn fit_report_text(bundle: &FitBundle) -> String {
    let full = model_report(bundle.full, "Full", bundle.coding);
    let restricted = model_report(bundle.restricted, "Restricted", bundle.coding);
    let mut out = String::from("Ordered logit model\n===================\n\n");
    render_model_text(&mut out, &full);
    out.push('\n');
    render_model_text(&mut out, &restricted);
    out.push_str("\nLikelihood ratio test (restricted vs full)\n");
    out.push_str(&format!(
        "  LR = {:.3}, df = {}, Prob > chi2 = {:.6}\n",
        bundle.lr.lr, bundle.lr.df, bundle.lr.p_value
    ));
    match bundle.lr.reject_at {
        Some(alpha) => out.push_str(&format!(
            "  reject the restricted model at alpha = {alpha}\n"
        )),
        None => out.push_str(&format!(
            "  fail to reject the restricted model at alpha = {}\n",
            bundle.alpha
        )),
    }
    if let Some(w) = &bundle.lr.warning {
        out.push_str(&format!("  warning: {w}\n"));
    }
    out.push_str(&format!(
        "\n  {:<12}{:>6}{:>12}{:>12}{:>12}{:>12}\n",
        "model", "n", "ll(null)", "ll(model)", "AIC", "BIC"
    ));
    for m in [&full, &restricted] {
        out.push_str(&format!(
            "  {:<12}{:>6}{:>12.3}{:>12.3}{:>12.3}{:>12.3}\n",
            m.name.to_lowercase(),
            m.n,
            m.ll_null,
            m.ll_model,
            m.aic,
            m.bic
        ));
    }
    out
}

pub fn fit_report_json(bundle: &FitBundle) -> String {
    let report = FitReportJson {
        full: model_report(bundle.full, "full", bundle.coding),
        restricted: model_report(bundle.restricted, "restricted", bundle.coding),
        lr_test: bundle.lr,
        alpha: bundle.alpha,
    };
    serde_json::to_string_pretty(&report).expect("fit report serializes")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

struct Emitter {
    out_dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Emitter {
    fn write(&mut self, name: &str, content: &str) -> Result<(), ReportError> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, content).map_err(|e| ReportError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.entries.push(ManifestEntry {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(content.as_bytes())),
            bytes: content.len(),
        });
        Ok(())
    }
}

fn csv_escape(value: &str) -> String {
    if value.contains([',', '"', '\n']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

fn csv_line(fields: &[&str]) -> String {
    fields
        .iter()
        .map(|f| csv_escape(f))
        .collect::<Vec<_>>()
        .join(",")
}

/// Render percentages from integer counts only, with fixed two-decimal
/// formatting so re-deriving from the CSV reproduces them exactly.
fn percent(count: usize, total: usize) -> String {
    if total == 0 {
        "0.00".to_string()
    } else {
        format!("{:.2}", 100.0 * count as f64 / total as f64)
    }
}

/// Write every aggregate as CSV + SVG, the fit report when present, and a
/// manifest hashing each emitted file. Output is deterministic.
pub fn emit_report(
    records: &[ReportRecord],
    fit: Option<&FitBundle>,
    out_dir: &Path,
) -> Result<Manifest, ReportError> {
    let mut emitter = Emitter {
        out_dir: out_dir.to_path_buf(),
        entries: Vec::new(),
    };

    // Top causes per age group and gender.
    let causes = top_k_by_group(records, &["age_group", "gender"], "cause", 3)?;
    let mut csv = csv_line(&["age_group", "gender", "cause", "count"]) + "\n";
    for row in &causes {
        csv += &csv_line(&[
            &row.group_key[0],
            &row.group_key[1],
            &row.item,
            &row.count.to_string(),
        ]);
        csv.push('\n');
    }
    emitter.write("causes_by_age_gender.csv", &csv)?;
    emitter.write(
        "causes_by_age_gender.svg",
        &grouped_bar_svg(&grouped_chart(
            "Top injury causes by age group and gender",
            &causes,
        )),
    )?;

    // Top severities per age/gender and per cause type.
    let sev_demo = top_k_by_group(records, &["age_group", "gender"], "severity", 3)?;
    let sev_cause = top_k_by_group(records, &["cause_type"], "severity", 3)?;
    let mut csv = csv_line(&["grouping", "group", "severity", "count"]) + "\n";
    for row in &sev_demo {
        csv += &csv_line(&[
            "age_gender",
            &row.group_key.join("/"),
            &row.item,
            &row.count.to_string(),
        ]);
        csv.push('\n');
    }
    for row in &sev_cause {
        csv += &csv_line(&[
            "cause_type",
            &row.group_key.join("/"),
            &row.item,
            &row.count.to_string(),
        ]);
        csv.push('\n');
    }
    emitter.write("severity_by_group.csv", &csv)?;
    let mut combined = sev_demo.clone();
    combined.extend(sev_cause);
    emitter.write(
        "severity_by_group.svg",
        &grouped_bar_svg(&grouped_chart(
            "Most frequent severity levels by group",
            &combined,
        )),
    )?;

    // Cause-type distribution.
    let dist = cause_type_distribution(records);
    let total = dist.total();
    let mut csv = csv_line(&["cause_type", "count", "percent"]) + "\n";
    for (name, count) in [
        ("HumanRelated", dist.human),
        ("EquipmentRelated", dist.equipment),
        ("Both", dist.both),
        ("Unclear", dist.unclear),
    ] {
        csv += &csv_line(&[name, &count.to_string(), &percent(count, total)]);
        csv.push('\n');
    }
    emitter.write("cause_type_distribution.csv", &csv)?;
    emitter.write(
        "cause_type_distribution.svg",
        &grouped_bar_svg(&BarChart {
            title: "Incidents by cause type".into(),
            groups: vec![BarGroup {
                label: "all records".into(),
                bars: vec![
                    ("HumanRelated".into(), dist.human as f64),
                    ("EquipmentRelated".into(), dist.equipment as f64),
                    ("Both".into(), dist.both as f64),
                    ("Unclear".into(), dist.unclear as f64),
                ],
            }],
        }),
    )?;

    // Component linkage counts.
    let links = component_link_counts(records);
    let mut csv = csv_line(&["component", "related", "caused"]) + "\n";
    for (component, related, caused) in &links {
        csv += &csv_line(&[component.name(), &related.to_string(), &caused.to_string()]);
        csv.push('\n');
    }
    emitter.write("component_links.csv", &csv)?;
    emitter.write(
        "component_links.svg",
        &grouped_bar_svg(&BarChart {
            title: "Incidents related to and caused by each component".into(),
            groups: links
                .iter()
                .map(|(component, related, caused)| BarGroup {
                    label: component.display_name().to_string(),
                    bars: vec![
                        ("related".into(), *related as f64),
                        ("caused".into(), *caused as f64),
                    ],
                })
                .collect(),
        }),
    )?;

    if let Some(bundle) = fit {
        emitter.write("fit_report.txt", &fit_report_text(bundle))?;
        emitter.write("fit_report.json", &fit_report_json(bundle))?;
    }

    let mut manifest = Manifest {
        files: emitter.entries.clone(),
    };
    manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, &manifest_json).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(manifest)
}

fn grouped_chart(title: &str, rows: &[GroupedCount]) -> BarChart {
    let mut groups: Vec<BarGroup> = Vec::new();
    for row in rows {
        let label = row.group_key.join("/");
        match groups.iter_mut().find(|g| g.label == label) {
            Some(g) => g.bars.push((row.item.clone(), row.count as f64)),
            None => groups.push(BarGroup {
                label,
                bars: vec![(row.item.clone(), row.count as f64)],
            }),
        }
    }
    BarChart {
        title: title.to_string(),
        groups,
    }
}
