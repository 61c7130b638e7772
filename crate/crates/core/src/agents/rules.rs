//! Deterministic keyword backend: a pure function of the narrative, driven by
//! the vocabularies in `rules.toml`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use super::{
    AgentBackend, AgentError, CauseDetermination, Component, ComponentLinkage, EbikeLabel,
    ExtractedFactors,
};
use crate::codebook::{scan_causes, CauseLabel, CauseLexicon};
use crate::text::{any_match, find_first, split_sentences, tokenize, Phrase};

/// The default vocabulary shipped with the binary.
const BUILTIN_RULES: &str = include_str!("../../defaults/rules.toml");

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("cannot read rules file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid rules file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("rules file names unknown component '{0}'")]
    UnknownComponent(String),
    #[error("rules file names unknown cause label '{0}'")]
    UnknownCause(String),
}

#[derive(Debug, Deserialize)]
struct RawRules {
    #[serde(default)]
    #[allow(dead_code)]
    version: u32,
    ebike: RawWordList,
    time: RawTime,
    #[serde(default)]
    weather: Vec<RawCanonical>,
    #[serde(default)]
    road: Vec<RawCanonical>,
    #[serde(default)]
    modes: Vec<RawCanonical>,
    failure: RawFailure,
    #[serde(default)]
    components: Vec<RawComponent>,
    #[serde(default)]
    causes: Vec<RawCause>,
    #[serde(default)]
    prompt_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct RawWordList {
    keywords: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawTime {
    words: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawCanonical {
    canonical: String,
    words: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawFailure {
    verbs: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawComponent {
    name: String,
    keywords: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawCause {
    label: String,
    synonyms: Vec<String>,
}

/// Parsed rule vocabularies.
#[derive(Debug, Clone)]
pub struct RuleSet {
    ebike_keywords: Vec<Phrase>,
    time_words: Vec<Phrase>,
    weather: Vec<(String, Vec<Phrase>)>,
    road: Vec<(String, Vec<Phrase>)>,
    modes: Vec<(String, Vec<Phrase>)>,
    failure_verbs: Vec<Phrase>,
    components: Vec<(Component, Vec<Phrase>)>,
    causes: Vec<(CauseLabel, Vec<String>)>,
    pub prompt_dir: Option<PathBuf>,
}

fn phrases(words: &[String]) -> Vec<Phrase> {
    words
        .iter()
        .map(|w| Phrase::new(w))
        .filter(|p| !p.is_empty())
        .collect()
}

impl RuleSet {
    /// Built-in defaults; infallible because the embedded file is validated
    /// by tests.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_RULES).expect("embedded rules.toml is valid")
    }

    pub fn from_path(path: &Path) -> Result<Self, RuleError> {
        let content = std::fs::read_to_string(path).map_err(|e| RuleError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml_str(&content)
    }

    pub fn from_toml_str(content: &str) -> Result<Self, RuleError> {
        let raw: RawRules = toml::from_str(content)?;
        let mut components = Vec::new();
        for c in &raw.components {
            let comp = Component::parse(&c.name)
                .ok_or_else(|| RuleError::UnknownComponent(c.name.clone()))?;
            components.push((comp, phrases(&c.keywords)));
        }
        let mut causes = Vec::new();
        for c in &raw.causes {
            let label = CauseLabel::parse(&c.label)
                .map_err(|_| RuleError::UnknownCause(c.label.clone()))?;
            causes.push((label, c.synonyms.clone()));
        }
        Ok(Self {
            ebike_keywords: phrases(&raw.ebike.keywords),
            time_words: phrases(&raw.time.words),
            weather: raw
                .weather
                .iter()
                .map(|c| (c.canonical.clone(), phrases(&c.words)))
                .collect(),
            road: raw
                .road
                .iter()
                .map(|c| (c.canonical.clone(), phrases(&c.words)))
                .collect(),
            modes: raw
                .modes
                .iter()
                .map(|c| (c.canonical.clone(), phrases(&c.words)))
                .collect(),
            failure_verbs: phrases(&raw.failure.verbs),
            components,
            causes,
            prompt_dir: raw.prompt_dir,
        })
    }

    pub fn cause_lexicon(&self) -> CauseLexicon {
        CauseLexicon::new(self.causes.clone())
    }

    pub fn component_keywords(&self) -> Vec<(Component, Vec<String>)> {
        self.components
            .iter()
            .map(|(c, ps)| (*c, ps.iter().map(|p| p.text.clone()).collect()))
            .collect()
    }

    pub fn into_backend(self) -> RuleBackend {
        RuleBackend::new(self)
    }
}

/// Keyword-driven implementation of all four agents.
pub struct RuleBackend {
    rules: RuleSet,
    lexicon: CauseLexicon,
}

impl RuleBackend {
    pub fn new(rules: RuleSet) -> Self {
        let lexicon = rules.cause_lexicon();
        Self { rules, lexicon }
    }

    /// Longest-match scan with token consumption, so "electric bicycle" does
    /// not additionally count as "bicycle".
    fn extract_modes(&self, tokens: &[String]) -> Vec<String> {
        let mut found = Vec::new();
        let mut pos = 0;
        while pos < tokens.len() {
            let mut best: Option<(usize, &str)> = None;
            for (canonical, ps) in &self.rules.modes {
                for phrase in ps {
                    if phrase.matches_at(tokens, pos)
                        && best.is_none_or(|(len, _)| phrase.len() > len)
                    {
                        best = Some((phrase.len(), canonical.as_str()));
                    }
                }
            }
            match best {
                Some((len, canonical)) => {
                    if !found.iter().any(|m: &String| m == canonical) {
                        found.push(canonical.to_string());
                    }
                    pos += len;
                }
                None => pos += 1,
            }
        }
        found
    }

    /// Earliest hit across all canonical groups wins.
    fn extract_canonical(groups: &[(String, Vec<Phrase>)], tokens: &[String]) -> Option<String> {
        let mut best: Option<(usize, &str)> = None;
        for (canonical, ps) in groups {
            if let Some(hit) = find_first(ps, tokens) {
                if best.is_none_or(|(pos, _)| hit.pos < pos) {
                    best = Some((hit.pos, canonical.as_str()));
                }
            }
        }
        best.map(|(_, c)| c.to_string())
    }
}

impl AgentBackend for RuleBackend {
    fn classify_ebike(&self, narrative: &str) -> Result<EbikeLabel, AgentError> {
        let tokens = tokenize(narrative);
        Ok(if any_match(&self.rules.ebike_keywords, &tokens) {
            EbikeLabel::Yes
        } else {
            EbikeLabel::No
        })
    }

    fn extract_factors(&self, narrative: &str) -> Result<ExtractedFactors, AgentError> {
        let tokens = tokenize(narrative);
        let modes = self.extract_modes(&tokens);
        let time = find_first(&self.rules.time_words, &tokens)
            .map(|hit| self.rules.time_words[hit.phrase].text.clone())
            .unwrap_or_default();
        let weather = Self::extract_canonical(&self.rules.weather, &tokens).unwrap_or_default();
        let road = Self::extract_canonical(&self.rules.road, &tokens).unwrap_or_default();
        let cause = scan_causes(narrative, &self.lexicon)
            .matched_phrase
            .unwrap_or_default();
        Ok(ExtractedFactors::new(modes, time, weather, road, cause))
    }

    fn determine_cause(
        &self,
        narrative: &str,
        _factors: &ExtractedFactors,
    ) -> Result<CauseDetermination, AgentError> {
        let scan = scan_causes(narrative, &self.lexicon);
        Ok(CauseDetermination {
            cause_label: scan.label,
            cause_type: scan.cause_type,
        })
    }

    fn detect_component_links(&self, narrative: &str) -> Result<ComponentLinkage, AgentError> {
        let mut related = BTreeSet::new();
        let mut caused = BTreeSet::new();
        for sentence in split_sentences(narrative) {
            let tokens = tokenize(sentence);
            let failing = any_match(&self.rules.failure_verbs, &tokens);
            for (component, keywords) in &self.rules.components {
                if any_match(keywords, &tokens) {
                    related.insert(*component);
                    if failing {
                        caused.insert(*component);
                    }
                }
            }
        }
        Ok(ComponentLinkage::new(related, caused))
    }
}
