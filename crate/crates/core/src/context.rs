//! Read path: picks a user's injectable facts and renders the block that
//! goes into an agent's system prompt.
//!
//! ```text
//! [Memory -- Known facts about this user]
//! [LT/personal] user works_at Google
//! [ST/task] user working_on Q3 report
//! ```

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::lifecycle::{promote_in, LifecyclePolicy};
use crate::model::{Category, MemoryFact, MemoryType, Scope};
use crate::store::{Actor, FactQuery, FactStore, QueryOrder, StoreError};

pub const CONTEXT_HEADER: &str = "[Memory -- Known facts about this user]";
pub const DEFAULT_CAP: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBlock {
    pub text: String,
    /// Ids of the rendered facts, in line order.
    pub fact_ids: Vec<Uuid>,
    pub truncated: bool,
    /// Set when the store failed and the block was left empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ContextBlock {
    pub fn empty() -> Self {
        Self {
            text: CONTEXT_HEADER.to_string(),
            fact_ids: Vec::new(),
            truncated: false,
            error: None,
        }
    }

    fn failed(e: &StoreError) -> Self {
        Self {
            error: Some(e.to_string()),
            ..Self::empty()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.fact_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextOptions {
    pub cap: usize,
    /// Whether to count this read towards the facts' access counts.
    pub touch: bool,
}

impl Default for ContextOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CAP,
            touch: true,
        }
    }
}

pub fn format_fact_line(f: &MemoryFact) -> String {
    let value = f.value.replace("\r\n", " ").replace(['\n', '\r'], " ");
    format!(
        "[{}/{}] {} {} {}",
        f.memory_type.label(),
        f.category.as_str(),
        f.subject,
        f.relation,
        value
    )
}

/// Fields recovered from a rendered line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedLine {
    pub memory_type: MemoryType,
    pub category: Category,
    pub subject: String,
    pub relation: String,
    pub value: String,
}

pub fn parse_fact_line(line: &str) -> Option<ParsedLine> {
    let rest = line.strip_prefix('[')?;
    let (label, rest) = rest.split_once("] ")?;
    let (kind, category) = label.split_once('/')?;
    let memory_type = match kind {
        "LT" => MemoryType::LongTerm,
        "ST" => MemoryType::ShortTerm,
        _ => return None,
    };
    let mut parts = rest.splitn(3, ' ');
    Some(ParsedLine {
        memory_type,
        category: category.parse().ok()?,
        subject: parts.next()?.to_string(),
        relation: parts.next()?.to_string(),
        value: parts.next()?.to_string(),
    })
}

/// Renders facts in the given order under the header.
pub fn render(facts: &[MemoryFact]) -> String {
    let mut text = CONTEXT_HEADER.to_string();
    for f in facts {
        text.push('\n');
        text.push_str(&format_fact_line(f));
    }
    text
}

/// Builds the block for `user`. Store failures never escape: they yield
/// a header-only block with `error` set.
pub fn build_context(
    store: &FactStore,
    user: &str,
    opts: ContextOptions,
    policy: &LifecyclePolicy,
) -> ContextBlock {
    match try_build(store, user, opts, policy) {
        Ok(block) => block,
        Err(e) => {
            tracing::warn!(user, error = %e, "context unavailable");
            ContextBlock::failed(&e)
        }
    }
}

fn try_build(
    store: &FactStore,
    user: &str,
    opts: ContextOptions,
    policy: &LifecyclePolicy,
) -> Result<ContextBlock, StoreError> {
    if opts.cap == 0 {
        return Err(StoreError::InvalidQuery("cap must be at least 1".into()));
    }
    let page = store.query(&FactQuery {
        scope: Some(Scope::User),
        order: QueryOrder::InjectionOrder,
        limit: Some(opts.cap),
        ..FactQuery::user(user)
    })?;
    let block = ContextBlock {
        text: render(&page.facts),
        fact_ids: page.facts.iter().map(|f| f.id).collect(),
        truncated: page.total > opts.cap,
        error: None,
    };
    if opts.touch && !block.fact_ids.is_empty() {
        store.transact(user, Actor::Api, |tx| {
            let touched: Vec<Uuid> = tx.touch(&block.fact_ids).touched.iter().map(|f| f.id).collect();
            promote_in(tx, &touched, policy)
        })?;
    }
    Ok(block)
}

/// Appends the block to a system prompt, separated by a blank line.
pub fn enrich_instructions(system_prompt: &str, block: &ContextBlock) -> String {
    if block.is_empty() {
        system_prompt.to_string()
    } else if system_prompt.is_empty() {
        block.text.clone()
    } else {
        format!("{system_prompt}\n\n{}", block.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{IdSource, ManualClock, NewFact};
    use chrono::{TimeZone, Utc};
    use std::sync::Arc;

    fn store() -> FactStore {
        let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2025, 3, 1, 12, 0, 0).unwrap()));
        FactStore::in_memory(clock, IdSource::seeded(3))
    }

    fn add(store: &FactStore, relation: &str, value: &str, category: Category, memory_type: MemoryType) -> Uuid {
        add_scoped(store, relation, value, category, memory_type, Scope::User)
    }

    fn add_scoped(
        store: &FactStore,
        relation: &str,
        value: &str,
        category: Category,
        memory_type: MemoryType,
        scope: Scope,
    ) -> Uuid {
        store
            .insert(
                NewFact {
                    id: None,
                    user_id: "u".into(),
                    scope,
                    agent_id: (scope == Scope::Agent).then(|| "a1".into()),
                    flow_id: (scope == Scope::Flow).then(|| "f1".into()),
                    subject: "user".into(),
                    relation: relation.into(),
                    value: value.into(),
                    category,
                    memory_type,
                    confidence: 0.9,
                    source_text: String::new(),
                },
                Actor::Cli,
            )
            .unwrap()
            .id
    }

    fn no_touch() -> ContextOptions {
        ContextOptions { cap: 30, touch: false }
    }

    #[test]
    fn line_format() {
        let s = store();
        let id = add(&s, "working_on", "Q3 report", Category::Task, MemoryType::ShortTerm);
        let f = s.get(id).unwrap().unwrap();
        assert_eq!(format_fact_line(&f), "[ST/task] user working_on Q3 report");
        let multi = MemoryFact {
            value: "line one\nline two\r\nthree".into(),
            ..f
        };
        assert_eq!(format_fact_line(&multi), "[ST/task] user working_on line one line two three");
        let parsed = parse_fact_line("[LT/preference] user prefers dark mode").unwrap();
        assert_eq!(parsed.value, "dark mode");
        assert_eq!(parsed.category, Category::Preference);
    }

    #[test]
    fn empty_user_gets_header_only() {
        let block = build_context(&store(), "nobody", ContextOptions::default(), &LifecyclePolicy::default());
        assert_eq!(block, ContextBlock::empty());
        assert_eq!(enrich_instructions("Be brief.", &block), "Be brief.");
    }

    #[test]
    fn long_term_first_and_scoped_facts_excluded() {
        let s = store();
        let st = add(&s, "working_on", "Q3 report", Category::Task, MemoryType::ShortTerm);
        let lt = add(&s, "prefers", "dark mode", Category::Preference, MemoryType::LongTerm);
        add_scoped(&s, "likes", "tea", Category::Preference, MemoryType::LongTerm, Scope::Agent);
        add_scoped(&s, "likes", "jazz", Category::Preference, MemoryType::LongTerm, Scope::Flow);
        let block = build_context(&s, "u", no_touch(), &LifecyclePolicy::default());
        assert_eq!(block.fact_ids, vec![lt, st]);
        assert_eq!(block.text.lines().count(), 3);
        assert_eq!(
            enrich_instructions("You are a helpful assistant.", &block),
            format!("You are a helpful assistant.\n\n{}", block.text)
        );
        assert_eq!(enrich_instructions("", &block), block.text);
    }

    #[test]
    fn cap_truncates_lowest_ranked() {
        let s = store();
        let ids: Vec<Uuid> = (0..5)
            .map(|i| add(&s, "likes", &format!("thing {i}"), Category::Preference, MemoryType::ShortTerm))
            .collect();
        for (i, id) in ids.iter().enumerate() {
            for _ in 0..i {
                s.touch("u", &[*id], Actor::Cli).unwrap();
            }
        }
        let block = build_context(&s, "u", ContextOptions { cap: 2, touch: false }, &LifecyclePolicy::default());
        assert!(block.truncated);
        assert_eq!(block.fact_ids, vec![ids[4], ids[3]]);
    }

    #[test]
    fn third_read_promotes() {
        let s = store();
        let id = add(&s, "working_on", "Q3 report", Category::Task, MemoryType::ShortTerm);
        let policy = LifecyclePolicy::default();
        for _ in 0..3 {
            let block = build_context(&s, "u", ContextOptions::default(), &policy);
            assert!(block.text.contains("[ST/task]"));
        }
        let block = build_context(&s, "u", ContextOptions::default(), &policy);
        assert!(block.text.contains("[LT/task]"), "{}", block.text);
        assert_eq!(s.get(id).unwrap().unwrap().access_count, 4);
    }

    #[test]
    fn store_failures_degrade() {
        let s = store();
        add(&s, "likes", "tea", Category::Preference, MemoryType::LongTerm);
        s.faults().fail_reads(true);
        let block = build_context(&s, "u", ContextOptions::default(), &LifecyclePolicy::default());
        assert_eq!(block.text, CONTEXT_HEADER);
        assert!(block.error.is_some() && block.fact_ids.is_empty() && !block.truncated);
        s.faults().fail_reads(false);
        s.faults().fail_writes(true);
        let block = build_context(&s, "u", ContextOptions::default(), &LifecyclePolicy::default());
        assert!(block.error.is_some() && block.fact_ids.is_empty());
        let preview = build_context(&s, "u", no_touch(), &LifecyclePolicy::default());
        assert_eq!(preview.fact_ids.len(), 1);
    }
}
