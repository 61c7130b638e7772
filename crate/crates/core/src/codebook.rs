//! Normalizes raw extracted strings into the numeric predictor coding used by
//! the severity model: age bins, adverse/favorable condition codes, and
//! canonical incident causes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{find_first, tokenize, Phrase};

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("age cannot be negative (got {0})")]
    NegativeAge(i64),
    #[error("unknown cause label '{0}'")]
    UnknownCauseLabel(String),
}

/// Why a record was left out of the modeling set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Exclusion {
    MissingAge,
    UndefinedGender,
    UndefinedSeverity,
    UnclearCause,
    NoTransportModes,
}

impl std::fmt::Display for Exclusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Exclusion::MissingAge => "age missing",
            Exclusion::UndefinedGender => "gender not Female/Male",
            Exclusion::UndefinedSeverity => "severity undefined (-1)",
            Exclusion::UnclearCause => "cause unclear",
            Exclusion::NoTransportModes => "no transportation modes extracted",
        };
        f.write_str(s)
    }
}

/// Age categories: 1 children (<=14), 2 youth (15-24), 3 adults (25-64),
/// 4 seniors (65+).
pub fn bin_age(age_years: i64) -> Result<u8, CodebookError> {
    if age_years < 0 {
        return Err(CodebookError::NegativeAge(age_years));
    }
    Ok(match age_years {
        0..=14 => 1,
        15..=24 => 2,
        25..=64 => 3,
        _ => 4,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionKind {
    Weather,
    Road,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BinaryCondition {
    Favorable,
    Adverse,
}

impl BinaryCondition {
    pub fn code(self) -> u8 {
        match self {
            BinaryCondition::Favorable => 1,
            BinaryCondition::Adverse => 2,
        }
    }
}

/// Adverse iff the raw string mentions the kind's adverse vocabulary
/// (case-insensitive substring); favorable otherwise, including when the
/// information is absent or unspecified.
pub fn code_condition(kind: ConditionKind, raw: &str) -> BinaryCondition {
    let adverse: &[&str] = match kind {
        ConditionKind::Weather => &["rain", "snow", "fog"],
        ConditionKind::Road => &["wet", "icy", "pothole"],
        ConditionKind::Time => &["evening", "night", "midnight"],
    };
    let lower = raw.to_lowercase();
    if adverse.iter().any(|w| lower.contains(w)) {
        BinaryCondition::Adverse
    } else {
        BinaryCondition::Favorable
    }
}

/// The fifteen canonical incident causes, in report order. The order is the
/// tie-break rule: when several causes match, the first one listed here wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub enum CauseLabel {
    BreakTrafficRules,
    CollisionOrCrash,
    FallOff,
    LostControl,
    NoHelmet,
    Speeding,
    BatteryIssue,
    BrakeIssue,
    HandlebarIssue,
    PedalIssue,
    WheelTireIssue,
    EquipmentMalfunction,
    DesignDefect,
    DefectiveParts,
    Fire,
}

impl CauseLabel {
    pub const ALL: [CauseLabel; 15] = [
        CauseLabel::BreakTrafficRules,
        CauseLabel::CollisionOrCrash,
        CauseLabel::FallOff,
        CauseLabel::LostControl,
        CauseLabel::NoHelmet,
        CauseLabel::Speeding,
        CauseLabel::BatteryIssue,
        CauseLabel::BrakeIssue,
        CauseLabel::HandlebarIssue,
        CauseLabel::PedalIssue,
        CauseLabel::WheelTireIssue,
        CauseLabel::EquipmentMalfunction,
        CauseLabel::DesignDefect,
        CauseLabel::DefectiveParts,
        CauseLabel::Fire,
    ];

    pub fn is_human_related(self) -> bool {
        matches!(
            self,
            CauseLabel::BreakTrafficRules
                | CauseLabel::CollisionOrCrash
                | CauseLabel::FallOff
                | CauseLabel::LostControl
                | CauseLabel::NoHelmet
                | CauseLabel::Speeding
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            CauseLabel::BreakTrafficRules => "BreakTrafficRules",
            CauseLabel::CollisionOrCrash => "CollisionOrCrash",
            CauseLabel::FallOff => "FallOff",
            CauseLabel::LostControl => "LostControl",
            CauseLabel::NoHelmet => "NoHelmet",
            CauseLabel::Speeding => "Speeding",
            CauseLabel::BatteryIssue => "BatteryIssue",
            CauseLabel::BrakeIssue => "BrakeIssue",
            CauseLabel::HandlebarIssue => "HandlebarIssue",
            CauseLabel::PedalIssue => "PedalIssue",
            CauseLabel::WheelTireIssue => "WheelTireIssue",
            CauseLabel::EquipmentMalfunction => "EquipmentMalfunction",
            CauseLabel::DesignDefect => "DesignDefect",
            CauseLabel::DefectiveParts => "DefectiveParts",
            CauseLabel::Fire => "Fire",
        }
    }

    pub fn parse(name: &str) -> Result<Self, CodebookError> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name() == name)
            .ok_or_else(|| CodebookError::UnknownCauseLabel(name.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CauseType {
    HumanRelated,
    EquipmentRelated,
    Both,
    Unclear,
}

impl CauseType {
    /// Numeric model code; `None` for Unclear (excluded from modeling).
    pub fn code(self) -> Option<u8> {
        match self {
            CauseType::HumanRelated => Some(1),
            CauseType::EquipmentRelated => Some(2),
            CauseType::Both => Some(3),
            CauseType::Unclear => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CauseType::HumanRelated => "HumanRelated",
            CauseType::EquipmentRelated => "EquipmentRelated",
            CauseType::Both => "Both",
            CauseType::Unclear => "Unclear",
        }
    }
}

/// Synonym phrases per canonical cause, kept in report order regardless of
/// configuration order.
#[derive(Debug, Clone)]
pub struct CauseLexicon {
    entries: Vec<(CauseLabel, Vec<Phrase>)>,
}

impl CauseLexicon {
    pub fn new(mut synonyms: Vec<(CauseLabel, Vec<String>)>) -> Self {
        synonyms.sort_by_key(|(label, _)| *label);
        let entries = synonyms
            .into_iter()
            .map(|(label, words)| {
                let phrases = words
                    .iter()
                    .map(|w| Phrase::new(w))
                    .filter(|p| !p.is_empty())
                    .collect();
                (label, phrases)
            })
            .collect();
        Self { entries }
    }
}

/// Everything a cause scan learned about a piece of text.
#[derive(Debug, Clone)]
pub struct CauseScan {
    /// Winning canonical label (first matching label in report order).
    pub label: Option<CauseLabel>,
    /// All matching labels, in report order.
    pub matched: Vec<CauseLabel>,
    /// Earliest synonym occurrence of the winning label, as written in the
    /// lexicon.
    pub matched_phrase: Option<String>,
    pub cause_type: CauseType,
}

/// Scan text for cause synonyms and classify the match set.
pub fn scan_causes(text: &str, lexicon: &CauseLexicon) -> CauseScan {
    let tokens = tokenize(text);
    let mut matched = Vec::new();
    let mut label = None;
    let mut matched_phrase = None;
    for (cause, phrases) in &lexicon.entries {
        if let Some(hit) = find_first(phrases, &tokens) {
            matched.push(*cause);
            if label.is_none() {
                label = Some(*cause);
                matched_phrase = Some(phrases[hit.phrase].text.clone());
            }
        }
    }
    let any_human = matched.iter().any(|c| c.is_human_related());
    let any_equipment = matched.iter().any(|c| !c.is_human_related());
    let cause_type = match (any_human, any_equipment) {
        (true, true) => CauseType::Both,
        (true, false) => CauseType::HumanRelated,
        (false, true) => CauseType::EquipmentRelated,
        (false, false) => CauseType::Unclear,
    };
    CauseScan {
        label,
        matched,
        matched_phrase,
        cause_type,
    }
}

/// Canonicalize a raw cause string: (label, numeric type code).
///
/// Unmatched input yields `(None, None)` and the record is excluded from
/// modeling.
pub fn map_cause(raw: &str, lexicon: &CauseLexicon) -> (Option<CauseLabel>, Option<u8>) {
    let scan = scan_causes(raw, lexicon);
    (scan.label, scan.cause_type.code())
}

/// Numeric covariates for one record: every field within its code set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorVector {
    pub age_cat: u8,
    pub gender: u8,
    #[serde(rename = "cause_type")]
    pub cause_type_code: u8,
    pub weather: u8,
    pub road: u8,
    pub time: u8,
    pub modes_count: u32,
}

impl PredictorVector {
    pub const RESTRICTED_NAMES: [&'static str; 4] = ["age", "gender", "cause_type", "modes"];
    pub const FULL_NAMES: [&'static str; 7] = [
        "age",
        "gender",
        "cause_type",
        "modes",
        "weather",
        "road",
        "time",
    ];

    /// Covariate row for the restricted model (age, gender, cause type, modes).
    pub fn restricted_row(&self) -> Vec<f64> {
        vec![
            f64::from(self.age_cat),
            f64::from(self.gender),
            f64::from(self.cause_type_code),
            f64::from(self.modes_count),
        ]
    }

    /// Covariate row for the full model (restricted plus weather, road, time).
    pub fn full_row(&self) -> Vec<f64> {
        let mut row = self.restricted_row();
        row.extend([
            f64::from(self.weather),
            f64::from(self.road),
            f64::from(self.time),
        ]);
        row
    }

    /// Indicator (dummy) expansion of the categorical codes, with the first
    /// level of each variable as the base.
    pub fn dummy_row(&self, full: bool) -> Vec<f64> {
        let ind = |c: bool| if c { 1.0 } else { 0.0 };
        let mut row = vec![
            ind(self.age_cat == 2),
            ind(self.age_cat == 3),
            ind(self.age_cat == 4),
            ind(self.gender == 2),
            ind(self.cause_type_code == 2),
            ind(self.cause_type_code == 3),
            f64::from(self.modes_count),
        ];
        if full {
            row.extend([
                ind(self.weather == 2),
                ind(self.road == 2),
                ind(self.time == 2),
            ]);
        }
        row
    }

    pub fn dummy_names(full: bool) -> Vec<String> {
        let mut names = vec![
            "age_youth".to_string(),
            "age_adult".to_string(),
            "age_senior".to_string(),
            "gender_male".to_string(),
            "cause_equipment".to_string(),
            "cause_both".to_string(),
            "modes".to_string(),
        ];
        if full {
            names.extend([
                "weather_adverse".to_string(),
                "road_adverse".to_string(),
                "time_adverse".to_string(),
            ]);
        }
        names
    }
}

/// Raw ingredients for a predictor vector, before coding.
#[derive(Debug, Clone, Default)]
pub struct PredictorSource<'a> {
    pub age_years: Option<i64>,
    pub gender_raw: &'a str,
    pub severity_code: i32,
    pub cause_raw: Option<&'a str>,
    /// Cause type already determined upstream; when absent it is re-derived
    /// from `cause_raw`.
    pub cause_type: Option<CauseType>,
    pub weather_raw: Option<&'a str>,
    pub road_raw: Option<&'a str>,
    pub time_raw: Option<&'a str>,
    pub modes_count: u32,
}

/// Numeric gender code (1 Female, 2 Male); anything else is undefined.
pub fn code_gender(raw: &str) -> Option<u8> {
    match raw.trim().to_lowercase().as_str() {
        "female" | "f" => Some(1),
        "male" | "m" => Some(2),
        _ => None,
    }
}

/// Compose the full coding for one record, or say why it is excluded.
pub fn build_predictor_vector(
    src: &PredictorSource,
    lexicon: &CauseLexicon,
) -> Result<PredictorVector, Exclusion> {
    if src.severity_code == -1 {
        return Err(Exclusion::UndefinedSeverity);
    }
    let gender = code_gender(src.gender_raw).ok_or(Exclusion::UndefinedGender)?;
    let age = src.age_years.ok_or(Exclusion::MissingAge)?;
    let age_cat = bin_age(age).map_err(|_| Exclusion::MissingAge)?;
    let cause_type = match src.cause_type {
        Some(t) => t,
        None => scan_causes(src.cause_raw.unwrap_or(""), lexicon).cause_type,
    };
    let cause_type_code = cause_type.code().ok_or(Exclusion::UnclearCause)?;
    if src.modes_count == 0 {
        return Err(Exclusion::NoTransportModes);
    }
    let condition = |kind, raw: Option<&str>| code_condition(kind, raw.unwrap_or("")).code();
    Ok(PredictorVector {
        age_cat,
        gender,
        cause_type_code,
        weather: condition(ConditionKind::Weather, src.weather_raw),
        road: condition(ConditionKind::Road, src.road_raw),
        time: condition(ConditionKind::Time, src.time_raw),
        modes_count: src.modes_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::rules::RuleSet;
    use crate::agents::ABSENT_SENTINEL;

    fn lexicon() -> CauseLexicon {
        RuleSet::builtin().cause_lexicon()
    }

    #[test]
    fn age_bins_and_boundaries() {
        assert_eq!(bin_age(14).unwrap(), 1);
        assert_eq!(bin_age(15).unwrap(), 2);
        assert_eq!(bin_age(24).unwrap(), 2);
        assert_eq!(bin_age(25).unwrap(), 3);
        assert_eq!(bin_age(64).unwrap(), 3);
        assert_eq!(bin_age(65).unwrap(), 4);
        assert_eq!(bin_age(0).unwrap(), 1);
        assert!(bin_age(-1).is_err());
    }

    #[test]
    fn condition_adverse_vocabularies() {
        use BinaryCondition::*;
        use ConditionKind::*;
        assert_eq!(code_condition(Weather, "rainy"), Adverse);
        assert_eq!(code_condition(Weather, "light SNOW"), Adverse);
        assert_eq!(code_condition(Weather, "foggy"), Adverse);
        assert_eq!(code_condition(Weather, "clear"), Favorable);
        assert_eq!(code_condition(Road, "wet"), Adverse);
        assert_eq!(code_condition(Road, "icy patch"), Adverse);
        assert_eq!(code_condition(Road, "pothole"), Adverse);
        assert_eq!(code_condition(Road, "dry"), Favorable);
        assert_eq!(code_condition(Time, "evening"), Adverse);
        assert_eq!(code_condition(Time, "night"), Adverse);
        assert_eq!(code_condition(Time, "midnight"), Adverse);
        assert_eq!(code_condition(Time, "afternoon"), Favorable);
    }

    #[test]
    fn condition_defaults_favorable_when_unspecified() {
        use BinaryCondition::Favorable;
        for kind in [
            ConditionKind::Weather,
            ConditionKind::Road,
            ConditionKind::Time,
        ] {
            assert_eq!(code_condition(kind, ""), Favorable);
            assert_eq!(code_condition(kind, ABSENT_SENTINEL), Favorable);
        }
    }

    #[test]
    fn map_cause_canonicalizes() {
        let lex = lexicon();
        assert_eq!(
            map_cause("collision", &lex),
            (Some(CauseLabel::CollisionOrCrash), Some(1))
        );
        assert_eq!(
            map_cause("pedal issue", &lex),
            (Some(CauseLabel::PedalIssue), Some(2))
        );
        assert_eq!(
            map_cause("spontaneous combustion of paperwork", &lex),
            (None, None)
        );
    }

    #[test]
    fn map_cause_idempotent_on_matched_phrases() {
        // Re-coding the phrase a scan matched must return the same label.
        let lex = lexicon();
        for raw in [
            "crash",
            "battery fire",
            "pedal issue",
            "he lost control",
            "defective",
        ] {
            let scan = scan_causes(raw, &lex);
            let phrase = scan.matched_phrase.as_deref().expect(raw);
            assert_eq!(scan_causes(phrase, &lex).label, scan.label, "{raw}");
            assert!(scan.label.is_some(), "{raw}");
        }
    }

    #[test]
    fn cause_type_both_needs_both_sides() {
        let lex = lexicon();
        let scan = scan_causes("brake cable snapped and he collided with a car", &lex);
        assert_eq!(scan.cause_type, CauseType::Both);
        // Winning label is the first in report order among matches.
        assert_eq!(scan.label, Some(CauseLabel::CollisionOrCrash));

        let scan = scan_causes("battery exploded while charging", &lex);
        assert_eq!(scan.cause_type, CauseType::EquipmentRelated);
        assert_eq!(scan.label, Some(CauseLabel::BatteryIssue));
    }

    #[test]
    fn predictor_vector_composition() {
        let lex = lexicon();
        let src = PredictorSource {
            age_years: Some(70),
            gender_raw: "Male",
            severity_code: 5,
            cause_raw: Some("battery fire"),
            cause_type: None,
            weather_raw: Some("rain"),
            road_raw: Some(ABSENT_SENTINEL),
            time_raw: Some("night"),
            modes_count: 1,
        };
        let v = build_predictor_vector(&src, &lex).unwrap();
        assert_eq!(
            (
                v.age_cat,
                v.gender,
                v.cause_type_code,
                v.weather,
                v.road,
                v.time,
                v.modes_count
            ),
            (4, 2, 2, 2, 1, 2, 1)
        );

        let src = PredictorSource {
            age_years: Some(10),
            gender_raw: "Female",
            severity_code: 2,
            cause_raw: Some("collision"),
            cause_type: None,
            weather_raw: None,
            road_raw: None,
            time_raw: None,
            modes_count: 2,
        };
        let v = build_predictor_vector(&src, &lex).unwrap();
        assert_eq!(
            (
                v.age_cat,
                v.gender,
                v.cause_type_code,
                v.weather,
                v.road,
                v.time,
                v.modes_count
            ),
            (1, 1, 1, 1, 1, 1, 2)
        );
    }

    #[test]
    fn predictor_vector_exclusions() {
        let lex = lexicon();
        let base = PredictorSource {
            age_years: Some(30),
            gender_raw: "Female",
            severity_code: 3,
            cause_raw: Some("crash"),
            cause_type: None,
            weather_raw: None,
            road_raw: None,
            time_raw: None,
            modes_count: 1,
        };
        let unclear = PredictorSource {
            cause_raw: Some("mystery"),
            ..base.clone()
        };
        assert_eq!(
            build_predictor_vector(&unclear, &lex),
            Err(Exclusion::UnclearCause)
        );
        let no_gender = PredictorSource {
            gender_raw: "Unspecified",
            ..base.clone()
        };
        assert_eq!(
            build_predictor_vector(&no_gender, &lex),
            Err(Exclusion::UndefinedGender)
        );
        let no_sev = PredictorSource {
            severity_code: -1,
            ..base.clone()
        };
        assert_eq!(
            build_predictor_vector(&no_sev, &lex),
            Err(Exclusion::UndefinedSeverity)
        );
        let no_modes = PredictorSource {
            modes_count: 0,
            ..base
        };
        assert_eq!(
            build_predictor_vector(&no_modes, &lex),
            Err(Exclusion::NoTransportModes)
        );
    }
}
