//! Generators shared by the property suites.
#![allow(dead_code)]

use std::sync::Arc;

use chrono::{TimeZone, Utc};
use proptest::prelude::*;
use uuid::Uuid;

use neusymms_core::extraction::ExtractorConfig;
use neusymms_core::lifecycle::LifecyclePolicy;
use neusymms_core::model::{CandidateFact, Category, MemoryFact, MemoryType, Scope};
use neusymms_core::rules::default_rule_pack;
use neusymms_core::service::MemoryService;
use neusymms_core::store::{FactStore, IdSource, ManualClock};

pub const USER: &str = "u";

/// Values chosen so that near-duplicates, case variants and unrelated
/// entities all occur often.
pub const VALUES: &[&str] = &[
    "Google",
    "google",
    "Googel",
    "Meta",
    "Mountain View",
    "Menlo Park",
    "Python",
    "Go",
    "cat named Whiskers",
    "Cat named whiskers.",
    "dark mode",
    "Q3 report",
    "tea",
    "coffee",
];

/// Single-valued, multi-valued, negation and catch-all relations.
pub const RELATIONS: &[&str] = &[
    "works_at",
    "lives_in",
    "speaks_language",
    "likes",
    "has_pet",
    "died",
    "no_longer_has",
    "stopped",
    "working_on",
    "discussing",
    "prefers",
    "call_me",
    "favorite_color",
    "zodiac_sign",
];

pub const CONFIDENCES: &[f64] = &[0.1, 0.29, 0.3, 0.31, 0.5, 0.85, 0.9, 0.95, 1.0];

pub fn scope_strategy(mixed: bool) -> BoxedStrategy<(Scope, Option<String>, Option<String>)> {
    if !mixed {
        return Just((Scope::User, None, None)).boxed();
    }
    prop_oneof![
        3 => Just((Scope::User, None, None)),
        1 => prop::sample::select(vec!["a1", "a2"]).prop_map(|a| (Scope::Agent, Some(a.to_string()), None)),
        1 => Just((Scope::Flow, None, Some("f1".to_string()))),
    ]
    .boxed()
}

pub fn candidate(mixed: bool) -> impl Strategy<Value = CandidateFact> {
    (
        prop::sample::select(vec!["user", "user", "user", "sister"]),
        prop::sample::select(RELATIONS.to_vec()),
        prop::sample::select(VALUES.to_vec()),
        prop::sample::select(CONFIDENCES.to_vec()),
        scope_strategy(mixed),
    )
        .prop_map(|(subject, relation, value, confidence, (scope, agent_id, flow_id))| CandidateFact {
            subject: subject.into(),
            relation: relation.into(),
            value: value.into(),
            confidence,
            scope,
            agent_id,
            flow_id,
            source_text: String::new(),
        })
}

pub fn candidates(mixed: bool, max: usize) -> impl Strategy<Value = Vec<CandidateFact>> {
    prop::collection::vec(candidate(mixed), 0..=max)
}

pub fn category_of(relation: &str) -> Category {
    default_rule_pack().policy.category_of(relation)
}

/// Active facts owned by `USER` with ids 1..=n, in id order.
pub fn existing_facts(mixed: bool, max: usize) -> impl Strategy<Value = Vec<MemoryFact>> {
    prop::collection::vec(
        (candidate(mixed), any::<bool>(), 0u64..6),
        0..=max,
    )
    .prop_map(|rows| {
        let t0 = Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap();
        rows.into_iter()
            .enumerate()
            .map(|(i, (c, long, access))| MemoryFact {
                id: Uuid::from_u128(i as u128 + 1),
                user_id: USER.into(),
                scope: c.scope,
                agent_id: c.agent_id,
                flow_id: c.flow_id,
                category: category_of(&c.relation),
                subject: c.subject,
                relation: c.relation,
                value: c.value,
                memory_type: if long { MemoryType::LongTerm } else { MemoryType::ShortTerm },
                confidence: c.confidence,
                access_count: access,
                source_text: String::new(),
                created_at: t0,
                last_accessed_at: t0,
                is_active: true,
            })
            .collect()
    })
}

pub fn clock() -> Arc<ManualClock> {
    Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2025, 3, 1, 9, 0, 0).unwrap()))
}

pub fn service_on(store: FactStore) -> MemoryService {
    MemoryService::new(
        Arc::new(store),
        default_rule_pack(),
        ExtractorConfig::default(),
        LifecyclePolicy::default(),
    )
    .unwrap()
}

pub fn fresh_service(seed: u64) -> (MemoryService, Arc<ManualClock>) {
    let clock = clock();
    let store = FactStore::in_memory(clock.clone(), IdSource::seeded(seed));
    (service_on(store), clock)
}
