//! Access-based promotion and TTL pruning of short-term facts.
//!
//! Both passes are pure selections over a user's facts; [`run_job`] applies
//! them user by user, each user in its own store transaction, so the job
//! never blocks writers of other users.

use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::model::{DecisionAction, EngineDecision, MemoryFact, MemoryType};
use crate::store::{Actor, ApplyReport, FactStore, StoreError, Txn};

pub const PROMOTION_REASON: &str = "access-promotion";
pub const PRUNE_REASON: &str = "ttl-prune";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifecyclePolicy {
    pub promotion_threshold: u64,
    pub short_term_ttl_hours: u64,
    /// Facts read more often than this are never pruned.
    pub prune_access_ceiling: u64,
    pub job_interval_minutes: u64,
}

impl Default for LifecyclePolicy {
    fn default() -> Self {
        Self {
            promotion_threshold: 3,
            short_term_ttl_hours: 24,
            prune_access_ceiling: 0,
            job_interval_minutes: 60,
        }
    }
}

impl LifecyclePolicy {
    pub fn check(&self) -> Result<(), String> {
        if self.promotion_threshold < 1 {
            return Err("promotion_threshold must be at least 1".into());
        }
        if self.short_term_ttl_hours < 1 {
            return Err("short_term_ttl_hours must be at least 1".into());
        }
        if self.job_interval_minutes < 1 {
            return Err("job_interval_minutes must be at least 1".into());
        }
        Ok(())
    }

    pub fn ttl(&self) -> Duration {
        Duration::hours(self.short_term_ttl_hours as i64)
    }

    pub fn job_interval(&self) -> StdDuration {
        StdDuration::from_secs(self.job_interval_minutes * 60)
    }

    pub fn promotable(&self, f: &MemoryFact) -> bool {
        f.is_active && f.memory_type == MemoryType::ShortTerm && f.access_count >= self.promotion_threshold
    }

    pub fn prunable(&self, f: &MemoryFact, now: DateTime<Utc>) -> bool {
        f.is_active
            && f.memory_type == MemoryType::ShortTerm
            && f.created_at <= now - self.ttl()
            && f.access_count <= self.prune_access_ceiling
    }
}

pub fn promote_decision(id: Uuid) -> EngineDecision {
    EngineDecision {
        action: DecisionAction::Promote,
        target_fact_id: Some(id),
        candidate: None,
        category: None,
        reason: PROMOTION_REASON.to_string(),
    }
}

fn prune_decision(id: Uuid) -> EngineDecision {
    EngineDecision {
        action: DecisionAction::Retract,
        target_fact_id: Some(id),
        candidate: None,
        category: None,
        reason: PRUNE_REASON.to_string(),
    }
}

/// Promote decisions for the given facts, in the order given.
pub fn promotions(facts: &[MemoryFact], policy: &LifecyclePolicy) -> Vec<EngineDecision> {
    facts
        .iter()
        .filter(|f| policy.promotable(f))
        .map(|f| promote_decision(f.id))
        .collect()
}

/// Ids of the facts a prune at `now` would deactivate.
pub fn prunable(facts: &[MemoryFact], policy: &LifecyclePolicy, now: DateTime<Utc>) -> Vec<Uuid> {
    facts.iter().filter(|f| policy.prunable(f, now)).map(|f| f.id).collect()
}

fn users(store: &FactStore, user: Option<&str>) -> Vec<String> {
    match user {
        Some(u) => vec![u.to_string()],
        None => store.users(),
    }
}

/// Promote decisions for every eligible fact, without applying them.
pub fn promote_eligible(
    store: &FactStore,
    user: Option<&str>,
    policy: &LifecyclePolicy,
) -> Result<Vec<EngineDecision>, StoreError> {
    let mut out = Vec::new();
    for u in users(store, user) {
        out.extend(promotions(&store.active_facts(&u)?, policy));
    }
    Ok(out)
}

/// Promotes, inside an open transaction, those of `ids` that qualify.
pub fn promote_in(tx: &mut Txn<'_>, ids: &[Uuid], policy: &LifecyclePolicy) -> Result<Vec<Uuid>, StoreError> {
    let mut report = ApplyReport::default();
    for &id in ids {
        if tx.get(id).is_some_and(|f| policy.promotable(&f)) {
            tx.apply(&promote_decision(id), &mut report)
                .map_err(|message| StoreError::Rejected { index: 0, message })?;
        }
    }
    Ok(report.promoted)
}

fn prune_in(tx: &mut Txn<'_>, policy: &LifecyclePolicy, now: DateTime<Utc>) -> Result<Vec<Uuid>, StoreError> {
    let mut report = ApplyReport::default();
    for id in prunable(&tx.facts(), policy, now) {
        tx.apply(&prune_decision(id), &mut report)
            .map_err(|message| StoreError::Rejected { index: 0, message })?;
    }
    Ok(report.retracted)
}

/// Deactivates stale short-term facts and returns their ids.
pub fn prune(
    store: &FactStore,
    user: Option<&str>,
    policy: &LifecyclePolicy,
    now: DateTime<Utc>,
) -> Result<Vec<Uuid>, StoreError> {
    let mut out = Vec::new();
    for u in users(store, user) {
        out.extend(store.transact(&u, Actor::Lifecycle, |tx| prune_in(tx, policy, now))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct JobReport {
    pub users: usize,
    pub promoted: Vec<Uuid>,
    pub pruned: Vec<Uuid>,
    /// Users whose pass failed, with the error.
    pub failures: Vec<(String, String)>,
}

impl JobReport {
    pub fn is_noop(&self) -> bool {
        self.promoted.is_empty() && self.pruned.is_empty() && self.failures.is_empty()
    }
}

/// Promotes then prunes for every user. A failure for one user is
/// recorded and the others still run.
pub fn run_job(store: &FactStore, policy: &LifecyclePolicy, now: DateTime<Utc>) -> JobReport {
    let users = store.users();
    let results = crate::par::map(&users, |u| {
        store.transact(u, Actor::Lifecycle, |tx| {
            let ids: Vec<Uuid> = tx.facts().iter().map(|f| f.id).collect();
            let promoted = promote_in(tx, &ids, policy)?;
            let pruned = prune_in(tx, policy, now)?;
            Ok((promoted, pruned))
        })
    });
    let mut report = JobReport {
        users: users.len(),
        ..JobReport::default()
    };
    for (user, result) in users.into_iter().zip(results) {
        match result {
            Ok((promoted, pruned)) => {
                report.promoted.extend(promoted);
                report.pruned.extend(pruned);
            }
            Err(e) => {
                tracing::warn!(user, error = %e, "lifecycle pass failed");
                report.failures.push((user, e.to_string()));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Category, Scope};
    use crate::store::{Clock, EventKind, IdSource, ManualClock, NewFact};
    use chrono::TimeZone;
    use std::sync::Arc;

    fn setup() -> (FactStore, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2025, 3, 1, 12, 0, 0).unwrap()));
        (FactStore::in_memory(clock.clone(), IdSource::seeded(7)), clock)
    }

    fn add(store: &FactStore, user: &str, value: &str, memory_type: MemoryType) -> Uuid {
        store
            .insert(
                NewFact {
                    id: None,
                    user_id: user.into(),
                    scope: Scope::User,
                    agent_id: None,
                    flow_id: None,
                    subject: "user".into(),
                    relation: "working_on".into(),
                    value: value.into(),
                    category: Category::Task,
                    memory_type,
                    confidence: 0.9,
                    source_text: String::new(),
                },
                Actor::Cli,
            )
            .unwrap()
            .id
    }

    fn touch(store: &FactStore, user: &str, id: Uuid, times: usize) {
        for _ in 0..times {
            store.touch(user, &[id], Actor::Api).unwrap();
        }
    }

    #[test]
    fn promotion_threshold() {
        let (store, _) = setup();
        let three = add(&store, "u", "a", MemoryType::ShortTerm);
        let two = add(&store, "u", "b", MemoryType::ShortTerm);
        let long = add(&store, "u", "c", MemoryType::LongTerm);
        touch(&store, "u", three, 3);
        touch(&store, "u", two, 2);
        touch(&store, "u", long, 50);
        let decisions = promote_eligible(&store, None, &LifecyclePolicy::default()).unwrap();
        assert_eq!(decisions, vec![promote_decision(three)]);
    }

    #[test]
    fn prune_rules() {
        let (store, clock) = setup();
        let stale = add(&store, "u", "a", MemoryType::ShortTerm);
        let read = add(&store, "u", "b", MemoryType::ShortTerm);
        let long = add(&store, "u", "c", MemoryType::LongTerm);
        touch(&store, "u", read, 1);
        let policy = LifecyclePolicy::default();
        let now = clock.now() + Duration::hours(24) - Duration::seconds(1);
        assert!(prune(&store, None, &policy, now).unwrap().is_empty());
        clock.advance(Duration::hours(25));
        assert_eq!(prune(&store, None, &policy, clock.now()).unwrap(), vec![stale]);
        let year = clock.now() + Duration::days(365);
        assert!(prune(&store, None, &policy, year).unwrap().is_empty());
        assert!(store.get(long).unwrap().unwrap().is_active);
        assert!(store.get(read).unwrap().unwrap().is_active);
        let e = store.events().into_iter().rfind(|e| e.kind == EventKind::FactDeactivated).unwrap();
        assert_eq!((e.reason.as_deref(), e.actor), (Some(PRUNE_REASON), Actor::Lifecycle));
    }

    #[test]
    fn job_is_idempotent_and_promotes_before_pruning() {
        let (store, clock) = setup();
        let hot = add(&store, "a", "hot", MemoryType::ShortTerm);
        let cold = add(&store, "b", "cold", MemoryType::ShortTerm);
        touch(&store, "a", hot, 3);
        clock.advance(Duration::hours(25));
        let policy = LifecyclePolicy::default();
        let first = run_job(&store, &policy, clock.now());
        assert_eq!((first.users, first.promoted.clone(), first.pruned.clone()), (2, vec![hot], vec![cold]));
        let hot_fact = store.get(hot).unwrap().unwrap();
        assert_eq!(hot_fact.memory_type, MemoryType::LongTerm);
        let promoted = store
            .events()
            .into_iter()
            .find(|e| e.kind == EventKind::FactUpdated && e.reason.as_deref() == Some(PROMOTION_REASON));
        assert!(promoted.is_some());
        assert!(run_job(&store, &policy, clock.now()).is_noop());
    }

    #[test]
    fn empty_store_and_failures() {
        let (store, clock) = setup();
        assert_eq!(run_job(&store, &LifecyclePolicy::default(), clock.now()), JobReport::default());
        add(&store, "u", "x", MemoryType::ShortTerm);
        store.faults().fail_writes(true);
        let report = run_job(&store, &LifecyclePolicy::default(), clock.now());
        assert_eq!(report.failures.len(), 1);
    }

    #[test]
    fn policy_checks() {
        assert!(LifecyclePolicy::default().check().is_ok());
        let bad = LifecyclePolicy {
            promotion_threshold: 0,
            ..LifecyclePolicy::default()
        };
        assert!(bad.check().is_err());
        let parsed: LifecyclePolicy = serde_json::from_str(r#"{"short_term_ttl_hours": 2}"#).unwrap();
        assert_eq!(parsed.ttl(), Duration::hours(2));
        assert_eq!(parsed.promotion_threshold, 3);
    }
}
