//! Command-line entry points: extract, fit, evaluate, report, all.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::agents::llm::{LlmBackend, LlmConfig, PromptTemplates};
use crate::agents::rules::RuleSet;
use crate::agents::{run_pipeline, AgentBackend, Component, PipelineConfig};
use crate::codebook::PredictorVector;
use crate::gateway::{Gateway, GatewayError, HttpTransport, RetryPolicy};
use crate::inference::{lr_test, LrTestResult};
use crate::ingest::{
    filter_for_model, load_reports, load_structured, write_rejects, write_structured,
    IncidentReport, InputFormat, StructuredIncident,
};
use crate::metrics::{tally, weighted_f1, ClassMetrics};
use crate::ordlogit::{fit, FitConfig, ModelData, OrderedLogitFit};
use crate::report::{emit_report, fit_report_json, fit_report_text, FitBundle, ReportRecord};

#[derive(Debug)]
pub enum CliError {
    /// Misconfiguration (exit code 2): bad flags, missing credentials.
    Config(String),
    /// Everything else fatal (exit code 1).
    Failed(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration: {msg}"),
            CliError::Failed(msg) => f.write_str(msg),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(msg) => CliError::Config(msg),
            other => CliError::Failed(other.to_string()),
        }
    }
}

macro_rules! failed_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Failed(e.to_string())
            }
        }
    )*};
}

failed_from!(
    crate::ingest::IngestError,
    crate::ordlogit::OrdLogitError,
    crate::inference::InferenceError,
    crate::metrics::MetricsError,
    crate::report::ReportError,
    crate::agents::rules::RuleError,
    std::io::Error
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Rules,
    Llm,
}

#[derive(Debug, Parser)]
#[command(
    name = "ebike-agents",
    version,
    about = "Turn narrative incident reports into structured e-bike safety records and severity statistics"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify and extract every report into structured JSONL.
    Extract(ExtractArgs),
    /// Fit the restricted and full severity models and compare them.
    Fit(FitArgs),
    /// Score component-cause predictions against a ground-truth CSV.
    Evaluate(EvaluateArgs),
    /// Emit aggregate tables, charts, and the fit report.
    Report(ReportArgs),
    /// Extract, fit, evaluate (when truth is given), and report.
    All(AllArgs),
}

#[derive(Debug, Args, Clone)]
struct ExtractOpts {
    /// Raw incident export (.csv or .jsonl).
    #[arg(long)]
    input: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Extraction backend.
    #[arg(long, value_enum, default_value = "rules")]
    backend: BackendKind,
    /// Model name sent to the LLM endpoint.
    #[arg(long, default_value = "gpt-4")]
    model: String,
    /// Response cache path (default: <out>/cache.jsonl).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Keyword/vocabulary config (default: built-in rules.toml).
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Worker threads, also the LLM in-flight bound.
    #[arg(long, default_value_t = 4)]
    jobs: usize,
    /// LLM requests-per-minute ceiling (0 = unlimited).
    #[arg(long, default_value_t = 60)]
    rpm: u32,
    /// Seed for deterministic backoff jitter and synthetic sampling.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args, Clone)]
struct ModelOpts {
    /// Structured JSONL (default: <out>/structured.jsonl).
    #[arg(long)]
    structured: Option<PathBuf>,
    /// Drop records whose gender is not Female/Male before modeling.
    #[arg(long, default_value_t = false)]
    drop_unspecified_gender: bool,
    /// Fit with indicator (dummy) coding instead of numeric codes.
    #[arg(long, default_value_t = false)]
    dummy_coding: bool,
    /// Significance level for the likelihood-ratio decision.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[command(flatten)]
    opts: ExtractOpts,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Raw incident export; supplies severities and demographics.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    model_opts: ModelOpts,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Ground-truth CSV: record_id,class,caused.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    structured: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    model_opts: ModelOpts,
    #[arg(long)]
    rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AllArgs {
    #[command(flatten)]
    opts: ExtractOpts,
    #[command(flatten)]
    model_opts: ModelOpts,
    /// Ground-truth CSV; evaluation is skipped when absent.
    #[arg(long)]
    truth: Option<PathBuf>,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Failed(_) => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Extract(args) => {
            cmd_extract(&args.opts)?;
            Ok(())
        }
        Command::Fit(args) => cmd_fit(&args.input, &args.out, args.model_opts.clone()),
        Command::Evaluate(args) => cmd_evaluate(&args.truth, &args.out, args.structured.as_deref()),
        Command::Report(args) => cmd_report(
            &args.input,
            &args.out,
            args.model_opts.clone(),
            args.rules.as_deref(),
        ),
        Command::All(args) => {
            cmd_extract(&args.opts)?;
            let fit_result = cmd_fit(&args.opts.input, &args.opts.out, args.model_opts.clone());
            if let Err(e) = fit_result {
                eprintln!("fit skipped: {e}");
            }
            if let Some(truth) = &args.truth {
                cmd_evaluate(truth, &args.opts.out, None)?;
            }
            cmd_report(
                &args.opts.input,
                &args.opts.out,
                args.model_opts.clone(),
                args.opts.rules.as_deref(),
            )
        }
    }
}

fn load_rules(path: Option<&Path>) -> Result<RuleSet, CliError> {
    match path {
        Some(p) => Ok(RuleSet::from_path(p)?),
        None => Ok(RuleSet::builtin()),
    }
}

fn build_backend(opts: &ExtractOpts, rules: &RuleSet) -> Result<Box<dyn AgentBackend>, CliError> {
    match opts.backend {
        BackendKind::Rules => Ok(Box::new(rules.clone().into_backend())),
        BackendKind::Llm => {
            let transport = HttpTransport::from_env(None)?;
            let policy = RetryPolicy {
                max_attempts: 4,
                backoff_base_ms: 500,
                max_in_flight: opts.jobs.max(1),
                requests_per_minute: opts.rpm,
                jitter_seed: opts.seed,
            };
            let cache_path = opts
                .cache
                .clone()
                .unwrap_or_else(|| opts.out.join("cache.jsonl"));
            let gateway = Gateway::new(Box::new(transport), policy, Some(&cache_path))?;
            let templates = match &rules.prompt_dir {
                Some(dir) => PromptTemplates::load(dir)?,
                None => PromptTemplates::builtin(),
            };
            let config = LlmConfig {
                model_name: opts.model.clone(),
                ..LlmConfig::default()
            };
            Ok(Box::new(LlmBackend::new(
                gateway,
                templates,
                config,
                rules.component_keywords(),
                rules.cause_lexicon(),
            )))
        }
    }
}

fn cmd_extract(opts: &ExtractOpts) -> Result<Vec<StructuredIncident>, CliError> {
    std::fs::create_dir_all(&opts.out)?;
    let rules = load_rules(opts.rules.as_deref())?;
    let backend = build_backend(opts, &rules)?;
    let lexicon = rules.cause_lexicon();

    let format = InputFormat::from_path(&opts.input);
    let outcome = load_reports(&opts.input, format)?;
    println!(
        "loaded {} report(s), {} reject/flag row(s)",
        outcome.reports.len(),
        outcome.rejects.len()
    );
    write_rejects(&outcome.rejects, &opts.out.join("rejects.csv"))?;

    let (records, summary) = run_pipeline(
        &outcome.reports,
        backend.as_ref(),
        &lexicon,
        &PipelineConfig {
            jobs: opts.jobs.max(1),
        },
    );
    let structured_path = opts.out.join("structured.jsonl");
    let written = write_structured(&records, &structured_path)?;
    println!(
        "extracted {written} record(s) -> {} (total={} ebike_yes={} ebike_no={} extraction_errors={})",
        structured_path.display(),
        summary.total,
        summary.ebike_yes,
        summary.ebike_no,
        summary.extraction_errors
    );
    Ok(records)
}

struct FitOutcome {
    full: OrderedLogitFit,
    restricted: OrderedLogitFit,
    lr: LrTestResult,
    coding: &'static str,
}

/// Model rows from structured records joined with their raw reports.
fn assemble_model_rows(
    structured: &[StructuredIncident],
    raw_by_id: &HashMap<String, IncidentReport>,
    dummy: bool,
) -> (Vec<(PredictorVector, i32)>, Vec<String>, Vec<String>) {
    let mut rows = Vec::new();
    for s in structured {
        let Some(v) = s.predictors else { continue };
        let Some(raw) = raw_by_id.get(&s.record_id) else {
            continue;
        };
        if raw.severity_code == -1 {
            continue;
        }
        rows.push((v, raw.severity_code));
    }
    let (restricted_names, full_names) = if dummy {
        (
            PredictorVector::dummy_names(false),
            PredictorVector::dummy_names(true),
        )
    } else {
        (
            PredictorVector::RESTRICTED_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            PredictorVector::FULL_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
    };
    (rows, restricted_names, full_names)
}

fn fit_models(
    structured: &[StructuredIncident],
    raw_by_id: &HashMap<String, IncidentReport>,
    opts: &ModelOpts,
) -> Result<FitOutcome, CliError> {
    let coding: &'static str = if opts.dummy_coding {
        "dummy"
    } else {
        "numeric"
    };
    let (rows, restricted_names, full_names) =
        assemble_model_rows(structured, raw_by_id, opts.dummy_coding);
    if rows.is_empty() {
        return Err(CliError::Failed(
            "no records are admissible for modeling (need defined age, gender, severity, and a clear cause)"
                .into(),
        ));
    }

    // Severity categories observed in the data, remapped onto 1..K.
    let distinct: BTreeSet<i32> = rows.iter().map(|(_, s)| *s).collect();
    if distinct.len() < 2 {
        return Err(CliError::Failed(format!(
            "all {} admissible record(s) share severity level {}; the outcome is not identifiable",
            rows.len(),
            rows[0].1
        )));
    }
    let index: BTreeMap<i32, usize> = distinct
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i + 1))
        .collect();
    let y: Vec<usize> = rows.iter().map(|(_, s)| index[s]).collect();
    let k = distinct.len();

    let make = |xs: Vec<Vec<f64>>, names: Vec<String>| -> Result<OrderedLogitFit, CliError> {
        let data = ModelData::new(xs, y.clone(), k, names)?;
        Ok(fit(&data, &FitConfig::default())?)
    };
    let restricted_rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|(v, _)| {
            if opts.dummy_coding {
                v.dummy_row(false)
            } else {
                v.restricted_row()
            }
        })
        .collect();
    let full_rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|(v, _)| {
            if opts.dummy_coding {
                v.dummy_row(true)
            } else {
                v.full_row()
            }
        })
        .collect();
    let restricted = make(restricted_rows, restricted_names)?;
    let full = make(full_rows, full_names)?;
    let lr = lr_test(&restricted, &full, opts.alpha)?;
    Ok(FitOutcome {
        full,
        restricted,
        lr,
        coding,
    })
}

fn load_joined(
    input: &Path,
    out: &Path,
    structured_override: Option<&Path>,
    drop_unspecified_gender: bool,
) -> Result<(Vec<StructuredIncident>, HashMap<String, IncidentReport>), CliError> {
    let structured_path = structured_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("structured.jsonl"));
    if !structured_path.exists() {
        return Err(CliError::Failed(format!(
            "structured records not found at {}; run `extract` first",
            structured_path.display()
        )));
    }
    let structured = load_structured(&structured_path)?;
    let outcome = load_reports(input, InputFormat::from_path(input))?;
    let (kept, summary) = filter_for_model(&outcome.reports, drop_unspecified_gender);
    println!(
        "modeling filter: {} in, {} kept, {} undefined severity, {} unspecified gender",
        summary.input,
        summary.kept,
        summary.dropped_undefined_severity,
        summary.dropped_unspecified_gender
    );
    let raw_by_id: HashMap<String, IncidentReport> =
        kept.into_iter().map(|r| (r.record_id.clone(), r)).collect();
    Ok((structured, raw_by_id))
}

fn cmd_fit(input: &Path, out: &Path, opts: ModelOpts) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    let (structured, raw_by_id) = load_joined(
        input,
        out,
        opts.structured.as_deref(),
        opts.drop_unspecified_gender,
    )?;
    let outcome = fit_models(&structured, &raw_by_id, &opts)?;
    let bundle = FitBundle {
        full: &outcome.full,
        restricted: &outcome.restricted,
        lr: &outcome.lr,
        alpha: opts.alpha,
        coding: outcome.coding,
    };
    let text = fit_report_text(&bundle);
    print!("{text}");
    std::fs::write(out.join("fit_report.txt"), &text)?;
    std::fs::write(out.join("fit_report.json"), fit_report_json(&bundle))?;
    println!(
        "fit report written to {} and {}",
        out.join("fit_report.txt").display(),
        out.join("fit_report.json").display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    classes: Vec<ClassMetrics>,
    weighted_f1: f64,
}

fn parse_truth(path: &Path) -> Result<BTreeMap<String, BTreeSet<String>>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Failed(format!("cannot read truth file {}: {e}", path.display())))?;
    let mut truths: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut rows = 0usize;
    for row in reader.records() {
        let row = row.map_err(|e| CliError::Failed(format!("truth file: {e}")))?;
        rows += 1;
        let id = row.get(0).unwrap_or("").trim().to_string();
        let class = row.get(1).unwrap_or("").trim().to_string();
        let caused = row.get(2).unwrap_or("").trim().to_lowercase();
        if id.is_empty() {
            return Err(CliError::Failed(format!(
                "truth file row {rows}: empty record_id"
            )));
        }
        if Component::parse(&class).is_none() {
            return Err(CliError::Failed(format!(
                "truth file row {rows}: unknown class '{class}'"
            )));
        }
        let caused = match caused.as_str() {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            other => {
                return Err(CliError::Failed(format!(
                    "truth file row {rows}: caused must be true/false, got '{other}'"
                )))
            }
        };
        let entry = truths.entry(id).or_default();
        if caused {
            entry.insert(class);
        }
    }
    if truths.is_empty() {
        return Err(CliError::Failed(format!(
            "truth file {} contains no annotation rows",
            path.display()
        )));
    }
    Ok(truths)
}

fn cmd_evaluate(
    truth: &Path,
    out: &Path,
    structured_override: Option<&Path>,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    let structured_path = structured_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("structured.jsonl"));
    let structured = load_structured(&structured_path)?;
    let truths = parse_truth(truth)?;

    let by_id: HashMap<&str, &StructuredIncident> = structured
        .iter()
        .map(|s| (s.record_id.as_str(), s))
        .collect();
    let unknown: Vec<&String> = truths
        .keys()
        .filter(|id| !by_id.contains_key(id.as_str()))
        .collect();
    if !unknown.is_empty() {
        let shown: Vec<&str> = unknown.iter().take(20).map(|s| s.as_str()).collect();
        return Err(CliError::Failed(format!(
            "{} truth record id(s) have no extracted record: [{}]",
            unknown.len(),
            shown.join(", ")
        )));
    }

    let predictions: BTreeMap<String, BTreeSet<String>> = truths
        .keys()
        .map(|id| {
            let caused: BTreeSet<String> = by_id[id.as_str()]
                .components_caused
                .iter()
                .map(|c| c.name().to_string())
                .collect();
            (id.clone(), caused)
        })
        .collect();

    let classes: Vec<String> = Component::ALL
        .iter()
        .map(|c| c.name().to_string())
        .collect();
    let counts = tally(&predictions, &truths, &classes)?;
    let per_class: Vec<ClassMetrics> = classes
        .iter()
        .map(|c| ClassMetrics::from_counts(c.clone(), counts[c]))
        .collect();
    let weighted = weighted_f1(&per_class)?;

    let fmt = |v: Option<f64>| {
        v.map(|x| format!("{x:5.2}"))
            .unwrap_or_else(|| "    —".into())
    };
    let mut text = format!(
        "{:<16}{:>5}{:>5}{:>5}{:>11}{:>8}{:>9}{:>9}\n",
        "class", "tp", "fp", "fn", "precision", "recall", "f1", "support"
    );
    for m in &per_class {
        text += &format!(
            "{:<16}{:>5}{:>5}{:>5}{:>11}{:>8}{:>9}{:>9}\n",
            m.class_name,
            m.counts.tp,
            m.counts.fp,
            m.counts.fn_,
            fmt(m.precision),
            fmt(m.recall),
            fmt(m.f1),
            m.support
        );
    }
    for m in &per_class {
        if m.support > 0 && m.f1.is_none() {
            text += &format!(
                "warning: class {} has undefined (0/0) metrics; it contributes 0 to the weighted F1\n",
                m.class_name
            );
        }
    }
    text += &format!("\nWeighted F1 score: {weighted:.2}\n");
    print!("{text}");

    std::fs::write(out.join("evaluation_report.txt"), &text)?;
    let report = EvaluationReport {
        classes: per_class,
        weighted_f1: weighted,
    };
    std::fs::write(
        out.join("evaluation_report.json"),
        serde_json::to_string_pretty(&report).expect("evaluation report serializes"),
    )?;
    Ok(())
}

fn cmd_report(
    input: &Path,
    out: &Path,
    opts: ModelOpts,
    rules: Option<&Path>,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    let rule_set = load_rules(rules)?;
    let lexicon = rule_set.cause_lexicon();
    let (structured, raw_by_id) = load_joined(
        input,
        out,
        opts.structured.as_deref(),
        opts.drop_unspecified_gender,
    )?;

    let records: Vec<ReportRecord> = structured
        .iter()
        .filter(|s| s.is_ebike)
        .map(|s| ReportRecord::build(s, raw_by_id.get(&s.record_id), &lexicon))
        .collect();

    let fit_outcome = match fit_models(&structured, &raw_by_id, &opts) {
        Ok(outcome) => Some(outcome),
        Err(e) => {
            eprintln!("fit not included in report: {e}");
            None
        }
    };
    let bundle = fit_outcome.as_ref().map(|o| FitBundle {
        full: &o.full,
        restricted: &o.restricted,
        lr: &o.lr,
        alpha: opts.alpha,
        coding: o.coding,
    });
    let manifest = emit_report(&records, bundle.as_ref(), out)?;
    println!(
        "report: {} file(s) written to {}",
        manifest.files.len(),
        out.display()
    );
    for entry in &manifest.files {
        println!("  {}  {}", &entry.sha256[..12], entry.path);
    }
    Ok(())
}
