use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::model::{Category, MemoryFact, MemoryType, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveFilter {
    #[default]
    Active,
    Inactive,
    Any,
}

impl ActiveFilter {
    pub fn admits(self, active: bool) -> bool {
        match self {
            ActiveFilter::Active => active,
            ActiveFilter::Inactive => !active,
            ActiveFilter::Any => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOrder {
    /// Long-term first, then most accessed, then most recently accessed.
    #[default]
    InjectionOrder,
    /// Most recently accessed first.
    Recency,
    /// Most accessed first.
    Access,
}

/// Conjunctive filters over one user's facts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FactQuery {
    pub user_id: String,
    pub scope: Option<Scope>,
    pub agent_id: Option<String>,
    pub flow_id: Option<String>,
    pub category: Option<Category>,
    pub memory_type: Option<MemoryType>,
    pub active: ActiveFilter,
    pub subject: Option<String>,
    pub relation: Option<String>,
    /// Case-insensitive substring of subject, relation or value.
    pub search: Option<String>,
    pub order: QueryOrder,
    pub limit: Option<usize>,
    pub offset: usize,
    /// Journal sequence to read at; `None` reads the live state.
    pub as_of: Option<u64>,
}

impl FactQuery {
    pub fn user(user_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            ..Self::default()
        }
    }

    pub fn matches(&self, f: &MemoryFact) -> bool {
        self.active.admits(f.is_active)
            && self.scope.is_none_or(|s| f.scope == s)
            && self.agent_id.as_ref().is_none_or(|a| f.agent_id.as_ref() == Some(a))
            && self.flow_id.as_ref().is_none_or(|x| f.flow_id.as_ref() == Some(x))
            && self.category.is_none_or(|c| f.category == c)
            && self.memory_type.is_none_or(|m| f.memory_type == m)
            && self.subject.as_ref().is_none_or(|s| &f.subject == s)
            && self.relation.as_ref().is_none_or(|r| &f.relation == r)
            && self.search.as_ref().is_none_or(|needle| search_matches(f, needle))
    }
}

fn search_matches(f: &MemoryFact, needle: &str) -> bool {
    let needle = needle.to_lowercase();
    [&f.subject, &f.relation, &f.value]
        .iter()
        .any(|field| field.to_lowercase().contains(&needle))
}

/// One page of results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactPage {
    pub facts: Vec<MemoryFact>,
    /// Matches before offset and limit were applied.
    pub total: usize,
    /// Journal sequence the page was read at; pass it back as `as_of`.
    pub snapshot: u64,
}

fn type_rank(m: MemoryType) -> u8 {
    match m {
        MemoryType::LongTerm => 0,
        MemoryType::ShortTerm => 1,
    }
}

/// Total order used for reads. Every order ends with the id, so pages
/// never overlap.
pub fn compare(order: QueryOrder, a: &MemoryFact, b: &MemoryFact) -> Ordering {
    let by_access = || b.access_count.cmp(&a.access_count);
    let by_recency = || b.last_accessed_at.cmp(&a.last_accessed_at);
    let primary = match order {
        QueryOrder::InjectionOrder => type_rank(a.memory_type)
            .cmp(&type_rank(b.memory_type))
            .then_with(by_access)
            .then_with(by_recency),
        QueryOrder::Recency => by_recency(),
        QueryOrder::Access => by_access().then_with(by_recency),
    };
    primary.then_with(|| a.id.cmp(&b.id))
}
