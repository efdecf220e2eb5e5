//! Rule packs: template declarations, production rules and relation policy.
//!
//! Packs are written in a small parenthesized language. Templates use the
//! familiar `deftemplate` form; rules use a fixed condition/action grammar
//! documented in `docs/rules.md`. The built-in pack ships as
//! `assets/default.rules` and is parsed at startup like any other pack.

mod parse;
mod policy;
mod print;

use std::fmt;

pub use parse::parse_rule_pack;
pub use policy::{RelationPattern, RelationPolicy};
pub use print::print_rule_pack;

use crate::model::{Category, DecisionAction};

/// Templates every pack must declare.
pub const BUILTIN_TEMPLATES: [&str; 4] = ["memory-fact", "candidate-fact", "engine-decision", "prompt-context"];

pub const MIN_SALIENCE: i32 = -10_000;
pub const MAX_SALIENCE: i32 = 10_000;

/// Source text of the built-in pack.
pub const DEFAULT_PACK_SOURCE: &str = include_str!("../../assets/default.rules");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotType {
    Symbol,
    String,
    Float,
    Integer,
}

impl SlotType {
    pub fn keyword(self) -> &'static str {
        match self {
            SlotType::Symbol => "SYMBOL",
            SlotType::String => "STRING",
            SlotType::Float => "FLOAT",
            SlotType::Integer => "INTEGER",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotDef {
    pub name: String,
    pub ty: SlotType,
    pub multi: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateDef {
    pub name: String,
    pub slots: Vec<SlotDef>,
}

impl TemplateDef {
    pub fn slot(&self, name: &str) -> Option<&SlotDef> {
        self.slots.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Classify,
    Reconcile,
    Lifecycle,
}

impl Phase {
    pub const ORDER: [Phase; 3] = [Phase::Classify, Phase::Reconcile, Phase::Lifecycle];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Classify => "classify",
            Phase::Reconcile => "reconcile",
            Phase::Lifecycle => "lifecycle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ORDER.into_iter().find(|p| p.as_str() == s)
    }
}

/// A literal constant in a pattern or test.
#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Symbol(String),
    Str(String),
    Int(i64),
    Float(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Var(String),
    Wildcard,
    Literal(Literal),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotTest {
    pub slot: String,
    pub term: Term,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub template: String,
    pub tests: Vec<SlotTest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predicate {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Neq,
    SameEntity,
    MultiValued,
    SingleValued,
    NegationRelation,
    NegationTarget,
    AutoLongTerm,
}

impl Predicate {
    const ALL: [Predicate; 12] = [
        Predicate::Lt,
        Predicate::Le,
        Predicate::Gt,
        Predicate::Ge,
        Predicate::Eq,
        Predicate::Neq,
        Predicate::SameEntity,
        Predicate::MultiValued,
        Predicate::SingleValued,
        Predicate::NegationRelation,
        Predicate::NegationTarget,
        Predicate::AutoLongTerm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Predicate::Lt => "<",
            Predicate::Le => "<=",
            Predicate::Gt => ">",
            Predicate::Ge => ">=",
            Predicate::Eq => "eq",
            Predicate::Neq => "neq",
            Predicate::SameEntity => "same-entity",
            Predicate::MultiValued => "multi-valued",
            Predicate::SingleValued => "single-valued",
            Predicate::NegationRelation => "negation-relation",
            Predicate::NegationTarget => "negation-target",
            Predicate::AutoLongTerm => "auto-long-term",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn arity(self) -> usize {
        match self {
            Predicate::MultiValued
            | Predicate::SingleValued
            | Predicate::NegationRelation
            | Predicate::AutoLongTerm => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestExpr {
    pub negated: bool,
    pub predicate: Predicate,
    pub args: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Match(Pattern),
    NotExists(Pattern),
    Test(TestExpr),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CategoryExpr {
    Literal(Category),
    /// Look the bound relation up in the policy's category map.
    OfRelation(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    AssertDecision {
        action: DecisionAction,
        target: Option<String>,
        reason: String,
    },
    SetCategory(CategoryExpr),
    MarkDuplicate {
        target: String,
        reason: String,
    },
    BindRetraction {
        target: String,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleDef {
    pub name: String,
    pub phase: Phase,
    pub salience: i32,
    pub conditions: Vec<Condition>,
    pub actions: Vec<Action>,
}

/// A parsed, validated rule pack. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct RulePack {
    pub templates: Vec<TemplateDef>,
    pub rules: Vec<RuleDef>,
    pub policy: RelationPolicy,
}

impl RulePack {
    pub fn template(&self, name: &str) -> Option<&TemplateDef> {
        self.templates.iter().find(|t| t.name == name)
    }

    /// Rules of one phase with their pack index, in definition order.
    pub fn rules_in(&self, phase: Phase) -> impl Iterator<Item = (usize, &RuleDef)> {
        self.rules.iter().enumerate().filter(move |(_, r)| r.phase == phase)
    }
}

/// The built-in pack.
pub fn default_rule_pack() -> RulePack {
    parse_rule_pack(DEFAULT_PACK_SOURCE).expect("built-in rule pack is valid")
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuleError {
    #[error("syntax error at line {line}, column {column} near `{token}`: {message}")]
    Syntax {
        line: usize,
        column: usize,
        token: String,
        message: String,
    },
    #[error("{0}")]
    Semantic(SemanticError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticError {
    pub rule: Option<String>,
    pub message: String,
}

impl fmt::Display for SemanticError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.rule {
            Some(rule) => write!(f, "rule `{rule}`: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_pack_classifies_per_table() {
        let pack = default_rule_pack();
        let p = &pack.policy;
        assert_eq!(p.category_of("works_at"), Category::Personal);
        assert_eq!(p.category_of("lives_in"), Category::Personal);
        assert_eq!(p.category_of("speaks_language"), Category::Skill);
        assert_eq!(p.category_of("prefers"), Category::Preference);
        assert_eq!(p.category_of("has_pet"), Category::Personal);
        assert_eq!(p.category_of("family"), Category::Relationship);
        assert_eq!(p.category_of("favorite_color"), Category::Preference);
        assert_eq!(p.category_of("always_cite_sources"), Category::Instruction);
        assert_eq!(p.category_of("scheduled_call"), Category::Temporal);
        assert_eq!(p.category_of("currently_reading"), Category::Context);
        assert_eq!(p.category_of("working_on"), Category::Task);
        assert_eq!(p.category_of("zorbulates"), Category::Other);
        assert_eq!(p.category_map.last(), Some(&(RelationPattern::Any, Category::Other)));
    }

    #[test]
    fn default_pack_policy_sets() {
        let p = default_rule_pack().policy;
        for neg in ["no_longer_has", "lost", "stopped", "died", "quit", "left", "no_longer_owns"] {
            assert!(p.is_negation(neg), "{neg}");
        }
        for multi in ["speaks_language", "has_skill", "knows", "likes", "has_pet"] {
            assert!(p.is_multi_valued(multi), "{multi}");
        }
        assert!(!p.is_multi_valued("works_at"));
        assert_eq!(p.similarity_threshold, 0.85);
        assert_eq!(p.auto_long_term_categories, policy::default_auto_long_term());
    }

    #[test]
    fn default_pack_has_all_phases() {
        let pack = default_rule_pack();
        for phase in Phase::ORDER {
            assert!(pack.rules_in(phase).count() > 0, "{phase:?}");
        }
        for t in BUILTIN_TEMPLATES {
            assert!(pack.template(t).is_some());
        }
    }
}
