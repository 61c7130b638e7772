//! LLM-backed agents: one zero-shot prompt per extracted field, yes/no
//! prompts for classification and component linkage, all via the gateway.

use std::collections::BTreeSet;
use std::path::Path;

use super::{
    AgentBackend, AgentError, CauseDetermination, Component, ComponentLinkage, EbikeLabel,
    ExtractedFactors, ABSENT_SENTINEL,
};
use crate::codebook::{scan_causes, CauseLexicon, CauseType};
use crate::gateway::{CompletionRequest, Gateway};
use crate::text::tokenize;

/// Prompt templates with `{narrative}` (and for components `{component}`,
/// `{keywords}`) placeholders.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub classify: String,
    pub modes: String,
    pub time: String,
    pub weather: String,
    pub road: String,
    pub cause: String,
    pub cause_type: String,
    pub component_related: String,
    pub component_caused: String,
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        Self {
            classify: include_str!("../../defaults/prompts/classify.txt").to_string(),
            modes: include_str!("../../defaults/prompts/modes.txt").to_string(),
            time: include_str!("../../defaults/prompts/time.txt").to_string(),
            weather: include_str!("../../defaults/prompts/weather.txt").to_string(),
            road: include_str!("../../defaults/prompts/road.txt").to_string(),
            cause: include_str!("../../defaults/prompts/cause.txt").to_string(),
            cause_type: include_str!("../../defaults/prompts/cause_type.txt").to_string(),
            component_related: include_str!("../../defaults/prompts/component_related.txt")
                .to_string(),
            component_caused: include_str!("../../defaults/prompts/component_caused.txt")
                .to_string(),
        }
    }

    /// Builtin templates overridden by any `<name>.txt` present in `dir`.
    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let mut t = Self::builtin();
        let read = |name: &str, slot: &mut String| -> std::io::Result<()> {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = std::fs::read_to_string(path)?;
            }
            Ok(())
        };
        read("classify", &mut t.classify)?;
        read("modes", &mut t.modes)?;
        read("time", &mut t.time)?;
        read("weather", &mut t.weather)?;
        read("road", &mut t.road)?;
        read("cause", &mut t.cause)?;
        read("cause_type", &mut t.cause_type)?;
        read("component_related", &mut t.component_related)?;
        read("component_caused", &mut t.component_caused)?;
        Ok(t)
    }
}

#[derive(Debug, Clone)]
pub struct LlmConfig {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            model_name: "gpt-4".into(),
            // Extraction must be replayable.
            temperature: 0.0,
            max_tokens: 256,
        }
    }
}

pub struct LlmBackend {
    gateway: Gateway,
    templates: PromptTemplates,
    config: LlmConfig,
    /// Component keyword lists rendered into the linkage prompts.
    component_keywords: Vec<(Component, Vec<String>)>,
    lexicon: CauseLexicon,
}

impl LlmBackend {
    pub fn new(
        gateway: Gateway,
        templates: PromptTemplates,
        config: LlmConfig,
        component_keywords: Vec<(Component, Vec<String>)>,
        lexicon: CauseLexicon,
    ) -> Self {
        Self {
            gateway,
            templates,
            config,
            component_keywords,
            lexicon,
        }
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn ask(&self, agent: &str, prompt: String) -> Result<String, AgentError> {
        let request = CompletionRequest {
            prompt,
            model_name: self.config.model_name.clone(),
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        self.gateway
            .complete(&request)
            .map(|r| r.text)
            .map_err(|e| AgentError::Backend {
                agent: agent.to_string(),
                msg: e.to_string(),
            })
    }

    /// One strict-format reprompt on parse failure, then a per-record error.
    fn ask_parsed<T>(
        &self,
        agent: &str,
        prompt: &str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<T, AgentError> {
        let reply = self.ask(agent, prompt.to_string())?;
        if let Some(v) = parse(&reply) {
            return Ok(v);
        }
        let strict = format!("{prompt}\n\nAnswer with exactly one word.");
        let reply = self.ask(agent, strict)?;
        parse(&reply).ok_or(AgentError::UnparseableReply {
            agent: agent.to_string(),
            reply,
        })
    }

    fn yes_no_prompt(&self, agent: &str, prompt: &str) -> Result<bool, AgentError> {
        self.ask_parsed(agent, prompt, parse_yes_no)
    }

    fn render(&self, template: &str, narrative: &str) -> String {
        template.replace("{narrative}", narrative)
    }

    fn render_component(&self, template: &str, narrative: &str, component: Component) -> String {
        let keywords = self
            .component_keywords
            .iter()
            .find(|(c, _)| *c == component)
            .map(|(_, kw)| kw.join(", "))
            .unwrap_or_default();
        template
            .replace("{narrative}", narrative)
            .replace("{component}", component.display_name())
            .replace("{keywords}", &keywords)
    }
}

/// First standalone "yes"/"no" word anywhere in the reply; tolerates
/// surrounding prose.
fn parse_yes_no(reply: &str) -> Option<bool> {
    tokenize(reply).into_iter().find_map(|t| match t.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    })
}

fn is_absent_reply(lower: &str) -> bool {
    lower.contains("no certain information")
        || lower.contains("not mentioned")
        || lower.contains("no information")
        || lower.contains("none mentioned")
}

/// Normalize a free-text field reply; absent information becomes the
/// sentinel.
fn parse_field(reply: &str) -> String {
    if is_absent_reply(&reply.to_lowercase()) {
        return ABSENT_SENTINEL.to_string();
    }
    let cleaned = clean_value(reply);
    if cleaned.is_empty() {
        ABSENT_SENTINEL.to_string()
    } else {
        cleaned
    }
}

fn clean_value(raw: &str) -> String {
    let mut s = raw.trim();
    loop {
        let trimmed = s
            .trim_matches(|c| matches!(c, '"' | '\'' | '`'))
            .trim_end_matches('.')
            .trim();
        if trimmed == s {
            break;
        }
        s = trimmed;
    }
    s.to_string()
}

/// Split a modes reply into cleaned, deduplicated entries.
fn parse_list(reply: &str) -> Vec<String> {
    if is_absent_reply(&reply.to_lowercase()) {
        return Vec::new();
    }
    reply
        .split([',', ';', '\n'])
        .flat_map(|part| part.split(" and "))
        .map(clean_value)
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_cause_type(reply: &str) -> Option<CauseType> {
    let lower = reply.to_lowercase();
    // "both" may be phrased as "both human and equipment"; check it first.
    if lower.contains("both") {
        Some(CauseType::Both)
    } else if lower.contains("human") {
        Some(CauseType::HumanRelated)
    } else if lower.contains("equipment") {
        Some(CauseType::EquipmentRelated)
    } else if lower.contains("unclear") || lower.contains("unknown") {
        Some(CauseType::Unclear)
    } else {
        None
    }
}

impl AgentBackend for LlmBackend {
    fn classify_ebike(&self, narrative: &str) -> Result<EbikeLabel, AgentError> {
        let prompt = self.render(&self.templates.classify, narrative);
        let yes = self.yes_no_prompt("classify_ebike", &prompt)?;
        Ok(if yes { EbikeLabel::Yes } else { EbikeLabel::No })
    }

    fn extract_factors(&self, narrative: &str) -> Result<ExtractedFactors, AgentError> {
        let modes = parse_list(&self.ask(
            "extract_factors/modes",
            self.render(&self.templates.modes, narrative),
        )?);
        let time = parse_field(&self.ask(
            "extract_factors/time",
            self.render(&self.templates.time, narrative),
        )?);
        let weather = parse_field(&self.ask(
            "extract_factors/weather",
            self.render(&self.templates.weather, narrative),
        )?);
        let road = parse_field(&self.ask(
            "extract_factors/road",
            self.render(&self.templates.road, narrative),
        )?);
        let cause = parse_field(&self.ask(
            "extract_factors/cause",
            self.render(&self.templates.cause, narrative),
        )?);
        Ok(ExtractedFactors::new(modes, time, weather, road, cause))
    }

    fn determine_cause(
        &self,
        narrative: &str,
        factors: &ExtractedFactors,
    ) -> Result<CauseDetermination, AgentError> {
        let prompt = self.render(&self.templates.cause_type, narrative);
        let cause_type = self.ask_parsed("determine_cause", &prompt, parse_cause_type)?;
        // Canonical label comes from the extracted cause phrase.
        let cause_label = if factors.cause_raw == ABSENT_SENTINEL {
            None
        } else {
            scan_causes(&factors.cause_raw, &self.lexicon).label
        };
        Ok(CauseDetermination {
            cause_label,
            cause_type,
        })
    }

    fn detect_component_links(&self, narrative: &str) -> Result<ComponentLinkage, AgentError> {
        let mut related = BTreeSet::new();
        let mut caused = BTreeSet::new();
        for component in Component::ALL {
            let prompt =
                self.render_component(&self.templates.component_related, narrative, component);
            if self.yes_no_prompt("detect_component_links/related", &prompt)? {
                related.insert(component);
                let prompt =
                    self.render_component(&self.templates.component_caused, narrative, component);
                if self.yes_no_prompt("detect_component_links/caused", &prompt)? {
                    caused.insert(component);
                }
            }
        }
        Ok(ComponentLinkage::new(related, caused))
    }
}
