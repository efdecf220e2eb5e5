//! Working-memory values and elements.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;

use crate::model::{CandidateFact, MemoryFact, PromptContext};
use crate::rules::Literal;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Sym(String),
    Str(String),
    Int(i64),
    Float(f64),
    Multi(Vec<Value>),
}

impl Value {
    pub fn sym(s: impl Into<String>) -> Self {
        Value::Sym(s.into())
    }

    pub fn text(&self) -> Cow<'_, str> {
        match self {
            Value::Sym(s) | Value::Str(s) => Cow::Borrowed(s),
            Value::Int(i) => Cow::Owned(i.to_string()),
            Value::Float(f) => Cow::Owned(format_float(*f)),
            Value::Multi(items) => Cow::Owned(
                items
                    .iter()
                    .map(|v| v.text().into_owned())
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
        }
    }

    pub fn number(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            _ => None,
        }
    }

    /// Numbers compare numerically, everything else by text.
    pub fn same(&self, other: &Value) -> bool {
        match (self.number(), other.number()) {
            (Some(a), Some(b)) => a == b,
            (None, None) => match (self, other) {
                (Value::Multi(a), Value::Multi(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same(y)),
                _ => self.text() == other.text(),
            },
            _ => false,
        }
    }
}

impl From<&Literal> for Value {
    fn from(l: &Literal) -> Self {
        match l {
            Literal::Symbol(s) => Value::Sym(s.clone()),
            Literal::Str(s) => Value::Str(s.clone()),
            Literal::Int(i) => Value::Int(*i),
            Literal::Float(f) => Value::Float(*f),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

fn format_float(f: f64) -> String {
    let s = format!("{f}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

pub const MEMORY_FACT: &str = "memory-fact";
pub const CANDIDATE_FACT: &str = "candidate-fact";
pub const PROMPT_CONTEXT: &str = "prompt-context";

/// A template instance in working memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Wme {
    pub template: &'static str,
    pub slots: BTreeMap<&'static str, Value>,
}

impl Wme {
    pub fn get(&self, slot: &str) -> Option<&Value> {
        self.slots.get(slot)
    }

    pub fn set(&mut self, slot: &'static str, value: Value) {
        self.slots.insert(slot, value);
    }

    pub fn from_memory_fact(f: &MemoryFact) -> Self {
        Self::memory_fact(
            f.id.to_string(),
            &f.subject,
            &f.relation,
            &f.value,
            f.confidence,
            f.scope.as_str(),
            f.scope_key(),
            f.category.as_str(),
            f.memory_type.as_str(),
            f.access_count,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn memory_fact(
        id: String,
        subject: &str,
        relation: &str,
        value: &str,
        confidence: f64,
        scope: &str,
        scope_key: String,
        category: &str,
        memory_type: &str,
        access_count: u64,
    ) -> Self {
        let slots = BTreeMap::from([
            ("fact-id", Value::Str(id)),
            ("subject", Value::sym(subject)),
            ("relation", Value::sym(relation)),
            ("value", Value::Str(value.to_string())),
            ("confidence", Value::Float(confidence)),
            ("scope", Value::sym(scope)),
            ("scope-key", Value::Str(scope_key)),
            ("category", Value::sym(category)),
            ("memory-type", Value::sym(memory_type)),
            ("access-count", Value::Int(access_count as i64)),
        ]);
        Wme {
            template: MEMORY_FACT,
            slots,
        }
    }

    pub fn from_candidate(position: usize, c: &CandidateFact) -> Self {
        let slots = BTreeMap::from([
            ("position", Value::Int(position as i64)),
            ("subject", Value::sym(c.subject.as_str())),
            ("relation", Value::sym(c.relation.as_str())),
            ("value", Value::Str(c.value.clone())),
            ("confidence", Value::Float(c.confidence)),
            ("scope", Value::sym(c.scope.as_str())),
            ("scope-key", Value::Str(c.scope_key())),
            ("category", Value::sym("unclassified")),
            ("revises", Value::sym("no")),
        ]);
        Wme {
            template: CANDIDATE_FACT,
            slots,
        }
    }

    pub fn from_prompt_context(ctx: &PromptContext) -> Self {
        let slots = BTreeMap::from([
            (
                "keywords",
                Value::Multi(ctx.keywords.iter().map(|k| Value::sym(k.as_str())).collect()),
            ),
            ("intent", Value::sym(ctx.intent.as_str())),
            ("turn-number", Value::Int(ctx.turn_number as i64)),
        ]);
        Wme {
            template: PROMPT_CONTEXT,
            slots,
        }
    }

    /// Short label used in traces.
    pub fn label(&self) -> String {
        match self.template {
            MEMORY_FACT => format!(
                "memory-fact:{}",
                self.get("fact-id").map(|v| v.text().into_owned()).unwrap_or_default()
            ),
            CANDIDATE_FACT => format!(
                "candidate-fact#{}",
                self.get("position").map(|v| v.text().into_owned()).unwrap_or_default()
            ),
            other => other.to_string(),
        }
    }
}
