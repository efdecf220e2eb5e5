use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::entity::{self, DEFAULT_SIMILARITY_THRESHOLD};
use crate::model::Category;

/// A relation token, a token prefix ending in `*`, or the bare catch-all `*`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationPattern {
    Exact(String),
    Prefix(String),
    Any,
}

impl RelationPattern {
    pub fn parse(text: &str) -> Option<Self> {
        if text == "*" {
            return Some(RelationPattern::Any);
        }
        let (body, wildcard) = match text.strip_suffix('*') {
            Some(body) => (body, true),
            None => (text, false),
        };
        if !crate::model::is_token(body) {
            return None;
        }
        Some(if wildcard {
            RelationPattern::Prefix(body.to_string())
        } else {
            RelationPattern::Exact(body.to_string())
        })
    }

    pub fn matches(&self, relation: &str) -> bool {
        match self {
            RelationPattern::Exact(r) => r == relation,
            RelationPattern::Prefix(p) => relation.starts_with(p.as_str()),
            RelationPattern::Any => true,
        }
    }
}

impl fmt::Display for RelationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RelationPattern::Exact(r) => f.write_str(r),
            RelationPattern::Prefix(p) => write!(f, "{p}*"),
            RelationPattern::Any => f.write_str("*"),
        }
    }
}

/// Relation-level tables consulted by rule predicates.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationPolicy {
    /// First match wins; always ends with `(* other)`.
    pub category_map: Vec<(RelationPattern, Category)>,
    pub multi_valued: BTreeSet<RelationPattern>,
    pub negation_relations: BTreeSet<RelationPattern>,
    /// Optional allow-list per negation relation of the positive relations
    /// it may retract. Absent key means any relation.
    pub negation_targets: BTreeMap<String, BTreeSet<String>>,
    pub auto_long_term_categories: BTreeSet<Category>,
    pub similarity_threshold: f64,
}

impl Default for RelationPolicy {
    fn default() -> Self {
        Self {
            category_map: vec![(RelationPattern::Any, Category::Other)],
            multi_valued: BTreeSet::new(),
            negation_relations: BTreeSet::new(),
            negation_targets: BTreeMap::new(),
            auto_long_term_categories: default_auto_long_term(),
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
        }
    }
}

pub(crate) fn default_auto_long_term() -> BTreeSet<Category> {
    [Category::Personal, Category::Preference, Category::Instruction, Category::Skill]
        .into_iter()
        .collect()
}

impl RelationPolicy {
    pub fn category_of(&self, relation: &str) -> Category {
        self.category_map
            .iter()
            .find(|(p, _)| p.matches(relation))
            .map(|(_, c)| *c)
            .unwrap_or(Category::Other)
    }

    pub fn is_multi_valued(&self, relation: &str) -> bool {
        self.multi_valued.iter().any(|p| p.matches(relation))
    }

    pub fn is_negation(&self, relation: &str) -> bool {
        self.negation_relations.iter().any(|p| p.matches(relation))
    }

    /// Whether a negation relation may retract facts of `positive`.
    pub fn negation_may_target(&self, negation: &str, positive: &str) -> bool {
        match self.negation_targets.get(negation) {
            Some(allowed) => allowed.contains(positive),
            None => true,
        }
    }

    pub fn is_auto_long_term(&self, category: Category) -> bool {
        self.auto_long_term_categories.contains(&category)
    }

    pub fn same_entity(&self, a: &str, b: &str) -> bool {
        entity::same_entity_unchecked(a, b, self.similarity_threshold)
    }
}
