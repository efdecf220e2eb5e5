//! Turning conversation turns into candidate facts.
//!
//! Extractors return raw candidates or an error; [`extract`] wraps any of
//! them with the guarantees callers rely on: failures become an empty list,
//! scopes are made consistent, invalid candidates are dropped and the
//! result is capped.

mod offline;
mod remote;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use offline::{OfflineExtractor, PatternError, PatternRule, DEFAULT_PATTERNS_SOURCE};
pub use remote::{RemoteExtractor, EXTRACTION_PROMPT};

use crate::model::{CandidateFact, Scope, Validate};

pub const DEFAULT_MAX_FACTS: usize = 10;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub role: Role,
    pub text: String,
    #[serde(default)]
    pub turn_number: u64,
}

impl ConversationTurn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            turn_number: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorMode {
    #[default]
    Offline,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub mode: ExtractorMode,
    /// Chat-completion endpoint URL, used in remote mode.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_facts: usize,
    pub timeout_ms: u64,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub max_in_flight: usize,
    /// Whether agent turns may source facts too.
    pub include_agent_turns: bool,
    /// Pattern file for offline mode; the built-in set when absent.
    pub patterns_path: Option<std::path::PathBuf>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            mode: ExtractorMode::Offline,
            endpoint: String::new(),
            model: String::new(),
            temperature: DEFAULT_TEMPERATURE,
            max_facts: DEFAULT_MAX_FACTS,
            timeout_ms: 10_000,
            token_env: None,
            max_in_flight: 8,
            include_agent_turns: false,
            patterns_path: None,
        }
    }
}

impl ExtractorConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn check(&self) -> Result<(), String> {
        if self.max_facts == 0 {
            return Err("max_facts must be at least 1".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} is outside [0, 2]", self.temperature));
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        if self.mode == ExtractorMode::Remote && self.endpoint.is_empty() {
            return Err("remote mode needs an endpoint".into());
        }
        if self.mode == ExtractorMode::Remote && self.model.is_empty() {
            return Err("remote mode needs a model name".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("request failed: {0}")]
    Transport(String),
    #[error("unusable model output: {0}")]
    Output(String),
}

pub trait Extractor: Send + Sync {
    /// Candidates for the given turns, before scope assignment and capping.
    fn extract_raw(&self, turns: &[ConversationTurn]) -> Result<Vec<CandidateFact>, ExtractError>;
}

/// The extractor a configuration describes.
pub fn build_extractor(cfg: &ExtractorConfig) -> Result<Box<dyn Extractor>, String> {
    cfg.check()?;
    Ok(match cfg.mode {
        ExtractorMode::Offline => {
            let patterns = match &cfg.patterns_path {
                Some(path) => OfflineExtractor::from_path(path).map_err(|e| e.to_string())?,
                None => OfflineExtractor::default_patterns(),
            };
            Box::new(patterns.with_max_facts(cfg.max_facts))
        }
        ExtractorMode::Remote => Box::new(RemoteExtractor::from_config(cfg.clone())),
    })
}

/// Runs an extractor with graceful degradation: never fails, never returns
/// more than `cfg.max_facts` candidates, never returns an invalid one.
pub fn extract(
    extractor: &dyn Extractor,
    turns: &[ConversationTurn],
    cfg: &ExtractorConfig,
    agent_id: Option<&str>,
    flow_id: Option<&str>,
) -> Vec<CandidateFact> {
    let turns: Vec<ConversationTurn> = turns
        .iter()
        .filter(|t| (t.role == Role::User || cfg.include_agent_turns) && !t.text.trim().is_empty())
        .cloned()
        .collect();
    if turns.is_empty() {
        return Vec::new();
    }
    let raw = match extractor.extract_raw(&turns) {
        Ok(raw) => raw,
        Err(e) => {
            tracing::warn!(error = %e, "extraction failed, continuing without new facts");
            return Vec::new();
        }
    };
    raw.into_iter()
        .map(|c| assign_scope(c, agent_id, flow_id))
        .filter(|c| c.validate().is_ok())
        .take(cfg.max_facts)
        .collect()
}

/// Makes a candidate's scope consistent with the ids available for it.
pub fn assign_scope(mut c: CandidateFact, agent_id: Option<&str>, flow_id: Option<&str>) -> CandidateFact {
    match (c.scope, agent_id, flow_id) {
        (Scope::Agent, Some(a), _) => {
            c.agent_id = Some(a.to_string());
            c.flow_id = None;
        }
        (Scope::Flow, _, Some(f)) => {
            c.flow_id = Some(f.to_string());
            c.agent_id = None;
        }
        (Scope::User, _, _) => {
            c.agent_id = None;
            c.flow_id = None;
        }
        (scope, _, _) => {
            tracing::warn!(
                scope = scope.as_str(),
                relation = %c.relation,
                "no id for extracted scope, storing as user scope"
            );
            c.scope = Scope::User;
            c.agent_id = None;
            c.flow_id = None;
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("extractor output rejected: {0}")]
pub struct OutputRejected(pub String);

/// Parses a model reply holding a JSON array of candidate objects.
///
/// Code fences and surrounding prose are tolerated when a single array can
/// be isolated. Elements that are not valid candidates are dropped one by
/// one; the rest are kept in order up to `max_facts`.
pub fn parse_extractor_output(raw: &str, max_facts: usize) -> Result<Vec<CandidateFact>, OutputRejected> {
    let items = isolate_array(raw)?;
    Ok(items.iter().filter_map(candidate_from_json).take(max_facts).collect())
}

fn isolate_array(raw: &str) -> Result<Vec<serde_json::Value>, OutputRejected> {
    let trimmed = raw.trim();
    if let Ok(items) = serde_json::from_str::<Vec<serde_json::Value>>(trimmed) {
        return Ok(items);
    }
    let (Some(start), Some(end)) = (trimmed.find('['), trimmed.rfind(']')) else {
        return Err(OutputRejected("no JSON array found".into()));
    };
    if end < start {
        return Err(OutputRejected("no JSON array found".into()));
    }
    serde_json::from_str(&trimmed[start..=end]).map_err(|e| OutputRejected(format!("malformed array: {e}")))
}

fn candidate_from_json(item: &serde_json::Value) -> Option<CandidateFact> {
    let obj = item.as_object()?;
    let text = |key: &str| obj.get(key)?.as_str().map(|s| s.trim().to_string());
    let scope = match obj.get("scope") {
        None | Some(serde_json::Value::Null) => Scope::User,
        Some(v) => v.as_str()?.trim().to_lowercase().parse().ok()?,
    };
    let candidate = CandidateFact {
        subject: text("subject")?.to_lowercase(),
        relation: text("relation")?.to_lowercase(),
        value: text("value")?,
        confidence: obj.get("confidence")?.as_f64()?,
        scope,
        agent_id: None,
        flow_id: None,
        source_text: String::new(),
    };
    // Scope ids are attached later by `assign_scope`, so check the rest
    // as if the candidate were user-scoped.
    let probe = CandidateFact {
        scope: Scope::User,
        ..candidate.clone()
    };
    probe.validate().is_ok().then_some(candidate)
}
