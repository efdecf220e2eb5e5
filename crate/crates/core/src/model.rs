//! Domain types shared by every layer of the memory engine.
//!
//! All types serialize to flat JSON objects with snake_case field names,
//! lowercase enum strings and RFC 3339 UTC timestamps. The same shape is
//! used by the store journal, the REST API and the CLI.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

/// The entity a fact describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    User,
    Agent,
    Flow,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::User, Scope::Agent, Scope::Flow];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::User => "user",
            Scope::Agent => "agent",
            Scope::Flow => "flow",
        }
    }
}

/// Semantic category assigned during classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Personal,
    Preference,
    Task,
    Relationship,
    Skill,
    Context,
    Instruction,
    Temporal,
    Other,
}

impl Category {
    pub const ALL: [Category; 9] = [
        Category::Personal,
        Category::Preference,
        Category::Task,
        Category::Relationship,
        Category::Skill,
        Category::Context,
        Category::Instruction,
        Category::Temporal,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Personal => "personal",
            Category::Preference => "preference",
            Category::Task => "task",
            Category::Relationship => "relationship",
            Category::Skill => "skill",
            Category::Context => "context",
            Category::Instruction => "instruction",
            Category::Temporal => "temporal",
            Category::Other => "other",
        }
    }
}

/// Memory horizon of a stored fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryType {
    ShortTerm,
    LongTerm,
}

impl MemoryType {
    pub fn as_str(self) -> &'static str {
        match self {
            MemoryType::ShortTerm => "short_term",
            MemoryType::LongTerm => "long_term",
        }
    }

    /// Two-letter label used in rendered context lines.
    pub fn label(self) -> &'static str {
        match self {
            MemoryType::ShortTerm => "ST",
            MemoryType::LongTerm => "LT",
        }
    }
}

macro_rules! impl_token_enum {
    ($ty:ty, $name:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = UnknownVariant;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::variants()
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| UnknownVariant {
                        kind: $name,
                        value: s.to_string(),
                    })
            }
        }
    };
}

impl Scope {
    fn variants() -> &'static [Scope] {
        &Self::ALL
    }
}

impl Category {
    fn variants() -> &'static [Category] {
        &Self::ALL
    }
}

impl MemoryType {
    fn variants() -> &'static [MemoryType] {
        &[MemoryType::ShortTerm, MemoryType::LongTerm]
    }
}

impl_token_enum!(Scope, "scope");
impl_token_enum!(Category, "category");
impl_token_enum!(MemoryType, "memory_type");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {kind} `{value}`")]
pub struct UnknownVariant {
    pub kind: &'static str,
    pub value: String,
}

/// A persisted, scoped subject-relation-value triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryFact {
    pub id: Uuid,
    pub user_id: String,
    pub scope: Scope,
    pub agent_id: Option<String>,
    pub flow_id: Option<String>,
    pub subject: String,
    pub relation: String,
    pub value: String,
    pub category: Category,
    pub memory_type: MemoryType,
    pub confidence: f64,
    pub access_count: u64,
    pub source_text: String,
    pub created_at: DateTime<Utc>,
    pub last_accessed_at: DateTime<Utc>,
    pub is_active: bool,
}

impl MemoryFact {
    /// Key that separates user-level facts from each agent's and flow's facts.
    pub fn scope_key(&self) -> String {
        scope_key(self.scope, self.agent_id.as_deref(), self.flow_id.as_deref())
    }
}

/// An extracted triple that has not been persisted yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFact {
    pub subject: String,
    pub relation: String,
    pub value: String,
    pub confidence: f64,
    #[serde(default = "default_scope")]
    pub scope: Scope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_id: Option<String>,
    #[serde(default)]
    pub source_text: String,
}

fn default_scope() -> Scope {
    Scope::User
}

impl CandidateFact {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        value: impl Into<String>,
        confidence: f64,
    ) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            value: value.into(),
            confidence,
            scope: Scope::User,
            agent_id: None,
            flow_id: None,
            source_text: String::new(),
        }
    }

    pub fn with_source(mut self, text: impl Into<String>) -> Self {
        self.source_text = text.into();
        self
    }

    pub fn scope_key(&self) -> String {
        scope_key(self.scope, self.agent_id.as_deref(), self.flow_id.as_deref())
    }
}

pub(crate) fn scope_key(scope: Scope, agent_id: Option<&str>, flow_id: Option<&str>) -> String {
    match scope {
        Scope::User => "user".to_string(),
        Scope::Agent => format!("agent:{}", agent_id.unwrap_or_default()),
        Scope::Flow => format!("flow:{}", flow_id.unwrap_or_default()),
    }
}

/// What the store should do with a candidate or an existing fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionAction {
    StoreShortTerm,
    StoreLongTerm,
    Retract,
    UpdateValue,
    Promote,
    Discard,
}

impl DecisionAction {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionAction::StoreShortTerm => "store_short_term",
            DecisionAction::StoreLongTerm => "store_long_term",
            DecisionAction::Retract => "retract",
            DecisionAction::UpdateValue => "update_value",
            DecisionAction::Promote => "promote",
            DecisionAction::Discard => "discard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            DecisionAction::StoreShortTerm,
            DecisionAction::StoreLongTerm,
            DecisionAction::Retract,
            DecisionAction::UpdateValue,
            DecisionAction::Promote,
            DecisionAction::Discard,
        ]
        .into_iter()
        .find(|a| a.as_str() == s)
    }

    /// Actions that settle a candidate.
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            DecisionAction::StoreShortTerm
                | DecisionAction::StoreLongTerm
                | DecisionAction::UpdateValue
                | DecisionAction::Discard
        )
    }

    pub fn memory_type(self) -> Option<MemoryType> {
        match self {
            DecisionAction::StoreShortTerm => Some(MemoryType::ShortTerm),
            DecisionAction::StoreLongTerm => Some(MemoryType::LongTerm),
            _ => None,
        }
    }
}

impl fmt::Display for DecisionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An instruction emitted by the rule engine, always carrying a reason.
///
/// Store decisions carry the id the new fact will receive in
/// `target_fact_id`, so that a later decision in the same list can refer
/// to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineDecision {
    pub action: DecisionAction,
    pub target_fact_id: Option<Uuid>,
    pub candidate: Option<CandidateFact>,
    pub category: Option<Category>,
    pub reason: String,
}

/// Conversational metadata available to rules.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptContext {
    pub keywords: Vec<String>,
    pub intent: String,
    pub turn_number: u64,
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

/// Empty when every invariant holds.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport(pub Vec<Violation>);

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.0.is_empty()
    }

    pub fn fields(&self) -> Vec<&'static str> {
        self.0.iter().map(|v| v.field).collect()
    }

    fn push(&mut self, field: &'static str, message: impl Into<String>) {
        self.0.push(Violation {
            field,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", v.field, v.message)?;
        }
        Ok(())
    }
}

/// Subject and relation tokens: `[a-z0-9_.]+`.
pub fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'.')
}

pub trait Validate {
    fn validate(&self) -> ValidationReport;
}

fn check_triple(r: &mut ValidationReport, subject: &str, relation: &str, value: &str) {
    if !is_token(subject) {
        r.push("subject", format!("`{subject}` is not a token matching [a-z0-9_.]+"));
    }
    if !is_token(relation) {
        r.push("relation", format!("`{relation}` is not a token matching [a-z0-9_.]+"));
    }
    if value.trim().is_empty() {
        r.push("value", "must not be empty");
    }
}

fn check_scope(r: &mut ValidationReport, scope: Scope, agent_id: Option<&str>, flow_id: Option<&str>) {
    let agent = agent_id.is_some_and(|a| !a.is_empty());
    let flow = flow_id.is_some_and(|f| !f.is_empty());
    match scope {
        Scope::User => {
            if agent_id.is_some() {
                r.push("agent_id", "must be absent for user scope");
            }
            if flow_id.is_some() {
                r.push("flow_id", "must be absent for user scope");
            }
        }
        Scope::Agent => {
            if !agent {
                r.push("agent_id", "required for agent scope");
            }
            if flow_id.is_some() {
                r.push("flow_id", "must be absent for agent scope");
            }
        }
        Scope::Flow => {
            if !flow {
                r.push("flow_id", "required for flow scope");
            }
            if agent_id.is_some() {
                r.push("agent_id", "must be absent for flow scope");
            }
        }
    }
}

fn check_confidence(r: &mut ValidationReport, confidence: f64) {
    if !(0.0..=1.0).contains(&confidence) {
        r.push("confidence", format!("{confidence} is outside [0, 1]"));
    }
}

impl Validate for MemoryFact {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        if self.user_id.is_empty() {
            r.push("user_id", "must not be empty");
        }
        check_scope(&mut r, self.scope, self.agent_id.as_deref(), self.flow_id.as_deref());
        check_triple(&mut r, &self.subject, &self.relation, &self.value);
        check_confidence(&mut r, self.confidence);
        if self.last_accessed_at < self.created_at {
            r.push("last_accessed_at", "earlier than created_at");
        }
        r
    }
}

impl Validate for CandidateFact {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        check_scope(&mut r, self.scope, self.agent_id.as_deref(), self.flow_id.as_deref());
        check_triple(&mut r, &self.subject, &self.relation, &self.value);
        check_confidence(&mut r, self.confidence);
        r
    }
}

impl Validate for EngineDecision {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        if self.reason.trim().is_empty() {
            r.push("reason", "must not be empty");
        }
        let needs_target = matches!(
            self.action,
            DecisionAction::Retract | DecisionAction::UpdateValue | DecisionAction::Promote
        );
        if needs_target && self.target_fact_id.is_none() {
            r.push("target_fact_id", format!("required for {}", self.action));
        }
        let needs_candidate = matches!(
            self.action,
            DecisionAction::StoreShortTerm | DecisionAction::StoreLongTerm | DecisionAction::UpdateValue
        );
        if needs_candidate && self.candidate.is_none() {
            r.push("candidate", format!("required for {}", self.action));
        }
        if self.action.memory_type().is_some() && self.category.is_none() {
            r.push("category", format!("required for {}", self.action));
        }
        if let Some(c) = &self.candidate {
            for v in c.validate().0 {
                r.push("candidate", format!("{}: {}", v.field, v.message));
            }
        }
        r
    }
}

/// Validates either kind of fact; named for symmetry with the rest of the API.
pub fn validate_fact<F: Validate>(fact: &F) -> ValidationReport {
    fact.validate()
}
