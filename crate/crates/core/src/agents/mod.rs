//! The four-agent extraction workflow: e-bike classification, factor
//! extraction, injury-cause determination, and incident-component link
//! detection. Every agent runs against either the deterministic rule backend
//! or the LLM backend behind the same trait.

pub mod llm;
pub mod rules;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{
    build_predictor_vector, CauseLabel, CauseLexicon, CauseType, PredictorSource,
};
use crate::ingest::{IncidentReport, StructuredIncident};

/// Exact sentinel emitted when a factor is absent from the narrative.
pub const ABSENT_SENTINEL: &str = "There are no certain information mentioned in the incident";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("narrative is empty")]
    EmptyNarrative,
    #[error("{agent}: unparseable reply after reprompt: {reply:?}")]
    UnparseableReply { agent: String, reply: String },
    #[error("{agent}: backend failure: {msg}")]
    Backend { agent: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EbikeLabel {
    Yes,
    No,
}

impl EbikeLabel {
    pub fn is_yes(self) -> bool {
        matches!(self, EbikeLabel::Yes)
    }
}

/// Factors pulled out of one narrative. Absent fields hold the sentinel
/// string, never an empty value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedFactors {
    pub modes: Vec<String>,
    pub modes_count: u32,
    pub time_raw: String,
    pub weather_raw: String,
    pub road_raw: String,
    pub cause_raw: String,
}

impl ExtractedFactors {
    /// Deduplicates modes (first occurrence wins) and keeps the count in sync.
    pub fn new(
        modes: Vec<String>,
        time_raw: String,
        weather_raw: String,
        road_raw: String,
        cause_raw: String,
    ) -> Self {
        let mut seen = BTreeSet::new();
        let modes: Vec<String> = modes
            .into_iter()
            .filter(|m| seen.insert(m.to_lowercase()))
            .collect();
        let modes_count = modes.len() as u32;
        let or_sentinel = |s: String| {
            if s.trim().is_empty() {
                ABSENT_SENTINEL.to_string()
            } else {
                s
            }
        };
        Self {
            modes,
            modes_count,
            time_raw: or_sentinel(time_raw),
            weather_raw: or_sentinel(weather_raw),
            road_raw: or_sentinel(road_raw),
            cause_raw: or_sentinel(cause_raw),
        }
    }

    pub fn absent() -> Self {
        Self::new(
            Vec::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CauseDetermination {
    /// Canonical cause; `None` when no cause evidence exists.
    pub cause_label: Option<CauseLabel>,
    pub cause_type: CauseType,
}

/// The nine mechanical/visibility components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    BrakeSystem,
    SteeringSystem,
    Pedals,
    DriveSystem,
    WheelTire,
    FrontFork,
    Frame,
    SaddleSeat,
    Visibility,
}

impl Component {
    pub const ALL: [Component; 9] = [
        Component::BrakeSystem,
        Component::SteeringSystem,
        Component::Pedals,
        Component::DriveSystem,
        Component::WheelTire,
        Component::FrontFork,
        Component::Frame,
        Component::SaddleSeat,
        Component::Visibility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::BrakeSystem => "BrakeSystem",
            Component::SteeringSystem => "SteeringSystem",
            Component::Pedals => "Pedals",
            Component::DriveSystem => "DriveSystem",
            Component::WheelTire => "WheelTire",
            Component::FrontFork => "FrontFork",
            Component::Frame => "Frame",
            Component::SaddleSeat => "SaddleSeat",
            Component::Visibility => "Visibility",
        }
    }

    /// Human-readable label used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Component::BrakeSystem => "Brake System",
            Component::SteeringSystem => "Steering System",
            Component::Pedals => "Pedals",
            Component::DriveSystem => "Drive System",
            Component::WheelTire => "Wheel/Tire",
            Component::FrontFork => "Front Fork",
            Component::Frame => "Frame",
            Component::SaddleSeat => "Saddles/Seats",
            Component::Visibility => "Visibility",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }
}

/// Which components an incident mentions and which it blames.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ComponentLinkage {
    related: BTreeSet<Component>,
    caused_by: BTreeSet<Component>,
}

impl ComponentLinkage {
    /// A component asserted as causal is always also related.
    pub fn new(related: BTreeSet<Component>, caused_by: BTreeSet<Component>) -> Self {
        let mut related = related;
        related.extend(caused_by.iter().copied());
        Self { related, caused_by }
    }

    pub fn related(&self) -> &BTreeSet<Component> {
        &self.related
    }

    pub fn caused_by(&self) -> &BTreeSet<Component> {
        &self.caused_by
    }
}

/// One backend behind all four agents.
pub trait AgentBackend: Send + Sync {
    fn classify_ebike(&self, narrative: &str) -> Result<EbikeLabel, AgentError>;
    fn extract_factors(&self, narrative: &str) -> Result<ExtractedFactors, AgentError>;
    fn determine_cause(
        &self,
        narrative: &str,
        factors: &ExtractedFactors,
    ) -> Result<CauseDetermination, AgentError>;
    fn detect_component_links(&self, narrative: &str) -> Result<ComponentLinkage, AgentError>;
}

fn require_narrative(narrative: &str) -> Result<(), AgentError> {
    if narrative.trim().is_empty() {
        Err(AgentError::EmptyNarrative)
    } else {
        Ok(())
    }
}

pub fn classify_ebike(
    narrative: &str,
    backend: &dyn AgentBackend,
) -> Result<EbikeLabel, AgentError> {
    require_narrative(narrative)?;
    backend.classify_ebike(narrative)
}

pub fn extract_factors(
    narrative: &str,
    backend: &dyn AgentBackend,
) -> Result<ExtractedFactors, AgentError> {
    require_narrative(narrative)?;
    backend.extract_factors(narrative)
}

pub fn determine_cause(
    narrative: &str,
    factors: &ExtractedFactors,
    backend: &dyn AgentBackend,
) -> Result<CauseDetermination, AgentError> {
    require_narrative(narrative)?;
    backend.determine_cause(narrative, factors)
}

pub fn detect_component_links(
    narrative: &str,
    backend: &dyn AgentBackend,
) -> Result<ComponentLinkage, AgentError> {
    require_narrative(narrative)?;
    backend.detect_component_links(narrative)
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Worker threads; extraction of separate records is independent.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { jobs: 1 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub total: usize,
    pub ebike_yes: usize,
    pub ebike_no: usize,
    pub extraction_errors: usize,
}

/// Run the classifier on every report and the remaining agents only on
/// reports it labels yes. Output order matches input order regardless of
/// worker scheduling; per-record failures produce records, never omissions.
pub fn run_pipeline(
    reports: &[IncidentReport],
    backend: &dyn AgentBackend,
    lexicon: &CauseLexicon,
    config: &PipelineConfig,
) -> (Vec<StructuredIncident>, RunSummary) {
    let slots: Mutex<Vec<Option<StructuredIncident>>> = Mutex::new(vec![None; reports.len()]);
    let next: AtomicUsize = AtomicUsize::new(0);
    let jobs = config.jobs.max(1).min(reports.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= reports.len() {
                    break;
                }
                let structured = process_one(&reports[i], backend, lexicon);
                slots.lock().expect("result slots")[i] = Some(structured);
            });
        }
    });

    let records: Vec<StructuredIncident> = slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|slot| slot.expect("every slot filled"))
        .collect();

    let summary = RunSummary {
        total: records.len(),
        ebike_yes: records.iter().filter(|r| r.is_ebike).count(),
        ebike_no: records
            .iter()
            .filter(|r| !r.is_ebike && r.error.is_none())
            .count(),
        extraction_errors: records.iter().filter(|r| r.error.is_some()).count(),
    };
    (records, summary)
}

fn process_one(
    report: &IncidentReport,
    backend: &dyn AgentBackend,
    lexicon: &CauseLexicon,
) -> StructuredIncident {
    let mut out = StructuredIncident::empty(&report.record_id);

    let label = match classify_ebike(&report.narrative, backend) {
        Ok(l) => l,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    if !label.is_yes() {
        return out;
    }
    out.is_ebike = true;

    let factors = match extract_factors(&report.narrative, backend) {
        Ok(f) => f,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    out.modes_count = factors.modes_count;
    out.time_raw = Some(factors.time_raw.clone());
    out.weather_raw = Some(factors.weather_raw.clone());
    out.road_raw = Some(factors.road_raw.clone());
    out.cause_raw = Some(factors.cause_raw.clone());

    let cause = match determine_cause(&report.narrative, &factors, backend) {
        Ok(c) => c,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    out.cause_type = Some(cause.cause_type);

    let links = match detect_component_links(&report.narrative, backend) {
        Ok(l) => l,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    out.components_related = links.related().iter().copied().collect();
    out.components_caused = links.caused_by().iter().copied().collect();

    let source = PredictorSource {
        age_years: report.age_years.map(i64::from),
        gender_raw: &report.gender_raw,
        severity_code: report.severity_code,
        cause_raw: Some(&factors.cause_raw),
        cause_type: Some(cause.cause_type),
        weather_raw: Some(&factors.weather_raw),
        road_raw: Some(&factors.road_raw),
        time_raw: Some(&factors.time_raw),
        modes_count: factors.modes_count,
    };
    out.predictors = build_predictor_vector(&source, lexicon).ok();
    out
}

#[cfg(test)]
mod tests {
    use super::rules::RuleSet;
    use super::*;
    use std::sync::atomic::AtomicUsize;

    /// Wraps a backend and counts downstream agent invocations per record.
    pub(crate) struct InstrumentedBackend<B> {
        pub inner: B,
        pub classify_calls: AtomicUsize,
        pub downstream_calls: AtomicUsize,
    }

    impl<B> InstrumentedBackend<B> {
        pub fn new(inner: B) -> Self {
            Self {
                inner,
                classify_calls: AtomicUsize::new(0),
                downstream_calls: AtomicUsize::new(0),
            }
        }
    }

    impl<B: AgentBackend> AgentBackend for InstrumentedBackend<B> {
        fn classify_ebike(&self, narrative: &str) -> Result<EbikeLabel, AgentError> {
            self.classify_calls.fetch_add(1, Ordering::Relaxed);
            self.inner.classify_ebike(narrative)
        }
        fn extract_factors(&self, narrative: &str) -> Result<ExtractedFactors, AgentError> {
            self.downstream_calls.fetch_add(1, Ordering::Relaxed);
            self.inner.extract_factors(narrative)
        }
        fn determine_cause(
            &self,
            narrative: &str,
            factors: &ExtractedFactors,
        ) -> Result<CauseDetermination, AgentError> {
            self.downstream_calls.fetch_add(1, Ordering::Relaxed);
            self.inner.determine_cause(narrative, factors)
        }
        fn detect_component_links(&self, narrative: &str) -> Result<ComponentLinkage, AgentError> {
            self.downstream_calls.fetch_add(1, Ordering::Relaxed);
            self.inner.detect_component_links(narrative)
        }
    }

    fn report(id: &str, narrative: &str) -> IncidentReport {
        IncidentReport {
            record_id: id.into(),
            year: 2021,
            state: "CA".into(),
            narrative: narrative.into(),
            age_years: Some(40),
            gender_raw: "Male".into(),
            severity_code: 3,
        }
    }

    #[test]
    fn factors_dedupe_modes() {
        let f = ExtractedFactors::new(
            vec!["car".into(), "Car".into(), "bicycle".into()],
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        );
        assert_eq!(f.modes_count, 2);
        assert_eq!(f.time_raw, ABSENT_SENTINEL);
    }

    #[test]
    fn linkage_caused_implies_related() {
        let linkage = ComponentLinkage::new(
            BTreeSet::from([Component::Pedals]),
            BTreeSet::from([Component::BrakeSystem]),
        );
        assert!(linkage.related().contains(&Component::BrakeSystem));
        assert!(linkage.caused_by().is_subset(linkage.related()));
    }

    #[test]
    fn empty_narrative_is_a_precondition_error() {
        let backend = RuleSet::builtin().into_backend();
        assert!(matches!(
            classify_ebike("  ", &backend),
            Err(AgentError::EmptyNarrative)
        ));
    }

    #[test]
    fn pipeline_gates_downstream_agents() {
        let backend = InstrumentedBackend::new(RuleSet::builtin().into_backend());
        let lexicon = RuleSet::builtin().cause_lexicon();
        let reports = vec![
            report("y1", "Rider crashed his e-bike into a parked car."),
            report("n1", "Child fell from a kick scooter in the driveway."),
            report("y2", "EBIKE caught fire while charging in the garage."),
            report("n2", "Pedestrian tripped over a loose paver."),
        ];
        let (records, summary) =
            run_pipeline(&reports, &backend, &lexicon, &PipelineConfig { jobs: 3 });
        assert_eq!(records.len(), 4);
        assert_eq!(summary.total, 4);
        assert_eq!(summary.ebike_yes, 2);
        assert_eq!(summary.ebike_no, 2);
        assert_eq!(summary.extraction_errors, 0);
        assert_eq!(backend.classify_calls.load(Ordering::Relaxed), 4);
        // Three downstream agents, only on the two yes-labeled records.
        assert_eq!(backend.downstream_calls.load(Ordering::Relaxed), 6);
        // Output order matches input order.
        let ids: Vec<&str> = records.iter().map(|r| r.record_id.as_str()).collect();
        assert_eq!(ids, vec!["y1", "n1", "y2", "n2"]);
        assert!(records[1].time_raw.is_none(), "no extraction on a no-label");
    }

    #[test]
    fn pipeline_emits_error_records_without_omissions() {
        let backend = RuleSet::builtin().into_backend();
        let lexicon = RuleSet::builtin().cause_lexicon();
        let reports = vec![report("ok", "e-bike crash"), report("empty", "   ")];
        let (records, summary) =
            run_pipeline(&reports, &backend, &lexicon, &PipelineConfig::default());
        assert_eq!(records.len(), 2);
        assert_eq!(summary.extraction_errors, 1);
        assert!(records[1].error.is_some());
        assert_eq!(summary.ebike_yes + summary.ebike_no + 1, summary.total);
    }

    #[test]
    fn pipeline_fills_predictors_when_codeable() {
        let backend = RuleSet::builtin().into_backend();
        let lexicon = RuleSet::builtin().cause_lexicon();
        let reports = vec![report(
            "p1",
            "A man riding an electric bicycle crashed into a car at night in the rain.",
        )];
        let (records, _) = run_pipeline(&reports, &backend, &lexicon, &PipelineConfig::default());
        let v = records[0].predictors.expect("codeable record");
        assert_eq!(v.gender, 2);
        assert_eq!(v.weather, 2);
        assert_eq!(v.time, 2);
        assert_eq!(v.modes_count, 2);
    }
}
