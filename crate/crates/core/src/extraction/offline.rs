//! Deterministic pattern-based extractor.
//!
//! The pattern file is an ordered list of regular expressions, each mapping
//! a named capture group to a relation. `value_capture` names the group; a
//! leading `each:` splits the captured text on commas and "and" into one
//! candidate per item. Matches are emitted by position in the turn, then by
//! pattern order, and repeated triples are dropped.

use std::collections::HashSet;
use std::path::Path;

use regex::Regex;
use serde::Deserialize;

use super::{ConversationTurn, ExtractError, Extractor, DEFAULT_MAX_FACTS};
use crate::entity::normalize_entity;
use crate::model::CandidateFact;

pub const DEFAULT_PATTERNS_SOURCE: &str = include_str!("../../assets/patterns.json");
const PATTERNS_FORMAT: &str = "neusymms-patterns";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternFile {
    format: String,
    version: u32,
    patterns: Vec<PatternEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternEntry {
    pattern: String,
    relation: String,
    confidence: f64,
    value_capture: String,
}

#[derive(Debug, Clone)]
pub struct PatternRule {
    pub regex: Regex,
    pub relation: String,
    pub confidence: f64,
    pub group: String,
    pub split: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum PatternError {
    #[error("pattern file: {0}")]
    Format(String),
    #[error("pattern {index}: {message}")]
    Entry { index: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct OfflineExtractor {
    rules: Vec<PatternRule>,
    max_facts: usize,
}

fn list_separator() -> &'static Regex {
    static SEP: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    SEP.get_or_init(|| Regex::new(r"\s*,\s*(?:and\s+)?|\s+and\s+").expect("separator regex"))
}

fn clean_value(raw: &str) -> String {
    raw.trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation() && !matches!(c, '+' | '#' | ')' | '"'))
        .trim()
        .to_string()
}

impl OfflineExtractor {
    pub fn from_json(source: &str) -> Result<Self, PatternError> {
        let file: PatternFile = serde_json::from_str(source).map_err(|e| PatternError::Format(e.to_string()))?;
        if file.format != PATTERNS_FORMAT || file.version != 1 {
            return Err(PatternError::Format(format!(
                "expected {PATTERNS_FORMAT} version 1, found {} version {}",
                file.format, file.version
            )));
        }
        let rules = file
            .patterns
            .into_iter()
            .enumerate()
            .map(|(index, e)| {
                let err = |message: String| PatternError::Entry { index, message };
                let regex = Regex::new(&e.pattern).map_err(|x| err(x.to_string()))?;
                let (split, group) = match e.value_capture.strip_prefix("each:") {
                    Some(g) => (true, g.to_string()),
                    None => (false, e.value_capture.clone()),
                };
                if !regex.capture_names().flatten().any(|n| n == group) {
                    return Err(err(format!("no capture group named `{group}`")));
                }
                if !(0.0..=1.0).contains(&e.confidence) {
                    return Err(err(format!("confidence {} is outside [0, 1]", e.confidence)));
                }
                if !crate::model::is_token(&e.relation) {
                    return Err(err(format!("relation `{}` is not a token", e.relation)));
                }
                Ok(PatternRule {
                    regex,
                    relation: e.relation,
                    confidence: e.confidence,
                    group,
                    split,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            rules,
            max_facts: DEFAULT_MAX_FACTS,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, PatternError> {
        let text = std::fs::read_to_string(path).map_err(|source| PatternError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// The built-in pattern set. Compiled once per process; clones share
    /// the compiled automata.
    pub fn default_patterns() -> Self {
        static BUILT_IN: std::sync::OnceLock<OfflineExtractor> = std::sync::OnceLock::new();
        BUILT_IN
            .get_or_init(|| Self::from_json(DEFAULT_PATTERNS_SOURCE).expect("built-in patterns are valid"))
            .clone()
    }

    pub fn with_max_facts(mut self, max_facts: usize) -> Self {
        self.max_facts = max_facts.max(1);
        self
    }

    pub fn rules(&self) -> &[PatternRule] {
        &self.rules
    }

    /// Candidates found in one text, in match order.
    pub fn extract_text(&self, text: &str) -> Vec<CandidateFact> {
        let mut hits: Vec<(usize, usize, String, &PatternRule)> = Vec::new();
        for (index, rule) in self.rules.iter().enumerate() {
            for caps in rule.regex.captures_iter(text) {
                let start = caps.get(0).map_or(0, |m| m.start());
                let Some(m) = caps.name(&rule.group) else { continue };
                if rule.split {
                    for item in list_separator().split(m.as_str()) {
                        hits.push((start, index, item.to_string(), rule));
                    }
                } else {
                    hits.push((start, index, m.as_str().to_string(), rule));
                }
            }
        }
        // Stable sort keeps list items in their spoken order.
        hits.sort_by_key(|(start, index, _, _)| (*start, *index));
        hits.into_iter()
            .filter_map(|(_, _, value, rule)| {
                let value = clean_value(&value);
                (!value.is_empty()).then(|| {
                    CandidateFact::new("user", rule.relation.clone(), value, rule.confidence).with_source(text)
                })
            })
            .collect()
    }

    /// Candidates across turns, de-duplicated and capped.
    pub fn extract_turns(&self, turns: &[ConversationTurn]) -> Vec<CandidateFact> {
        let mut seen = HashSet::new();
        turns
            .iter()
            .flat_map(|t| self.extract_text(&t.text))
            .filter(|c| seen.insert((c.subject.clone(), c.relation.clone(), normalize_entity(&c.value))))
            .take(self.max_facts)
            .collect()
    }
}

impl Extractor for OfflineExtractor {
    fn extract_raw(&self, turns: &[ConversationTurn]) -> Result<Vec<CandidateFact>, ExtractError> {
        Ok(self.extract_turns(turns))
    }
}
