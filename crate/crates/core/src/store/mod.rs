//! Journaled, per-user sharded fact store.
//!
//! Every mutation goes through [`FactStore::transact`]: changes are staged
//! against the user's shard under its write lock, written to the journal
//! in one append, and only then made visible. A failed closure or a failed
//! journal write leaves the store untouched. Writes for different users
//! only meet at the journal append.

mod clock;
mod journal;
mod query;
mod shard;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub use clock::{Clock, IdSource, ManualClock, SystemClock};
pub use journal::{
    read_journal, read_snapshot, Actor, EventKind, FileError, JournalEvent, Snapshot, FORMAT_VERSION, JOURNAL_FORMAT,
    SNAPSHOT_FORMAT,
};
pub use query::{compare, ActiveFilter, FactPage, FactQuery, QueryOrder};
pub use shard::{dedup_key, DedupKey};

use journal::JournalWriter;
use shard::UserShard;

use crate::model::{
    CandidateFact, Category, DecisionAction, EngineDecision, MemoryFact, MemoryType, Scope, Validate,
    ValidationReport,
};

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid fact: {0}")]
    Validation(ValidationReport),
    #[error("unknown fact {0}")]
    UnknownFact(Uuid),
    #[error("fact id {0} is already in use")]
    DuplicateId(Uuid),
    #[error("fact {id} would duplicate active fact {existing}")]
    Conflict { id: Uuid, existing: Uuid },
    #[error("decision {index} rejected: {message}")]
    Rejected { index: usize, message: String },
    #[error("journal sequence {seq}: {message}")]
    Corrupt { seq: u64, message: String },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("store unavailable: {0}")]
    Unavailable(&'static str),
    #[error(transparent)]
    File(#[from] FileError),
}

/// A fact to insert; lifecycle fields are set by the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewFact {
    #[serde(default)]
    pub id: Option<Uuid>,
    pub user_id: String,
    #[serde(default = "user_scope")]
    pub scope: Scope,
    #[serde(default)]
    pub agent_id: Option<String>,
    #[serde(default)]
    pub flow_id: Option<String>,
    pub subject: String,
    pub relation: String,
    pub value: String,
    pub category: Category,
    pub memory_type: MemoryType,
    pub confidence: f64,
    #[serde(default)]
    pub source_text: String,
}

fn user_scope() -> Scope {
    Scope::User
}

impl NewFact {
    pub fn from_candidate(
        user_id: &str,
        c: &CandidateFact,
        category: Category,
        memory_type: MemoryType,
        id: Option<Uuid>,
    ) -> Self {
        Self {
            id,
            user_id: user_id.to_string(),
            scope: c.scope,
            agent_id: c.agent_id.clone(),
            flow_id: c.flow_id.clone(),
            subject: c.subject.clone(),
            relation: c.relation.clone(),
            value: c.value.clone(),
            category,
            memory_type,
            confidence: c.confidence,
            source_text: c.source_text.clone(),
        }
    }
}

/// Editable fields of a stored fact.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactPatch {
    pub subject: Option<String>,
    pub relation: Option<String>,
    pub value: Option<String>,
    pub category: Option<Category>,
    pub memory_type: Option<MemoryType>,
    pub confidence: Option<f64>,
    pub is_active: Option<bool>,
}

impl FactPatch {
    pub fn is_empty(&self) -> bool {
        *self == FactPatch::default()
    }
}

/// Which facts a clear applies to; empty means all of the user's facts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClearFilter {
    #[serde(default)]
    pub scope: Option<Scope>,
    #[serde(default)]
    pub agent_id: Option<String>,
    #[serde(default)]
    pub flow_id: Option<String>,
}

impl ClearFilter {
    pub fn matches(&self, f: &MemoryFact) -> bool {
        self.scope.is_none_or(|s| f.scope == s)
            && self.agent_id.as_ref().is_none_or(|a| f.agent_id.as_ref() == Some(a))
            && self.flow_id.as_ref().is_none_or(|x| f.flow_id.as_ref() == Some(x))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ApplyReport {
    pub stored: Vec<Uuid>,
    /// Facts whose confidence absorbed a duplicate.
    pub merged: Vec<Uuid>,
    pub retracted: Vec<Uuid>,
    pub updated: Vec<Uuid>,
    pub promoted: Vec<Uuid>,
    pub discarded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TouchReport {
    pub touched: Vec<MemoryFact>,
    /// Ids that were unknown, inactive or owned by another user.
    pub skipped: Vec<Uuid>,
}

/// Switches for simulating storage failures.
#[derive(Debug, Default)]
pub struct Faults {
    reads: AtomicBool,
    writes: AtomicBool,
}

impl Faults {
    pub fn fail_reads(&self, on: bool) {
        self.reads.store(on, AtomicOrdering::SeqCst);
    }

    pub fn fail_writes(&self, on: bool) {
        self.writes.store(on, AtomicOrdering::SeqCst);
    }

    fn check_read(&self) -> Result<(), StoreError> {
        if self.reads.load(AtomicOrdering::SeqCst) {
            return Err(StoreError::Unavailable("read failure injected"));
        }
        Ok(())
    }

    fn check_write(&self) -> Result<(), StoreError> {
        if self.writes.load(AtomicOrdering::SeqCst) {
            return Err(StoreError::Unavailable("write failure injected"));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct JournalState {
    last_seq: u64,
    /// Sequence covered by the last compaction; older tokens are invalid.
    compacted_at: u64,
    events: Vec<JournalEvent>,
    writer: Option<JournalWriter>,
}

#[derive(Debug)]
pub struct FactStore {
    shards: RwLock<HashMap<String, Arc<RwLock<UserShard>>>>,
    owners: RwLock<HashMap<Uuid, String>>,
    journal: Mutex<JournalState>,
    /// Commits hold it shared; compaction and snapshots hold it exclusively.
    gate: RwLock<()>,
    clock: Arc<dyn Clock>,
    ids: IdSource,
    faults: Faults,
    dir: Option<PathBuf>,
}

struct Pending {
    kind: EventKind,
    fact: Option<MemoryFact>,
    decision: Option<EngineDecision>,
    reason: Option<String>,
    detail: Option<serde_json::Value>,
}

/// Staged changes to one user's facts.
pub struct Txn<'a> {
    store: &'a FactStore,
    user: &'a str,
    shard: &'a UserShard,
    actor: Actor,
    now: DateTime<Utc>,
    staged: BTreeMap<Uuid, MemoryFact>,
    /// Dedup keys of the active staged facts.
    staged_keys: HashMap<DedupKey, BTreeSet<Uuid>>,
    new_ids: BTreeSet<Uuid>,
    /// Ids of store decisions that merged into an existing fact.
    aliases: HashMap<Uuid, Uuid>,
    pending: Vec<Pending>,
}

impl<'a> Txn<'a> {
    pub fn now(&self) -> DateTime<Utc> {
        self.now
    }

    pub fn actor(&self) -> Actor {
        self.actor
    }

    pub fn user_id(&self) -> &str {
        self.user
    }

    fn resolve(&self, id: Uuid) -> Uuid {
        self.aliases.get(&id).copied().unwrap_or(id)
    }

    pub fn get(&self, id: Uuid) -> Option<MemoryFact> {
        let id = self.resolve(id);
        self.staged.get(&id).or_else(|| self.shard.get(&id)).cloned()
    }

    /// Every fact of the user including staged changes, ordered by id.
    pub fn facts(&self) -> Vec<MemoryFact> {
        let mut out: BTreeMap<Uuid, MemoryFact> = self.shard.facts().map(|f| (f.id, f.clone())).collect();
        out.extend(self.staged.iter().map(|(k, v)| (*k, v.clone())));
        out.into_values().collect()
    }

    fn active_duplicate(&self, key: &DedupKey, exclude: Option<Uuid>) -> Option<Uuid> {
        let staged = self
            .staged_keys
            .get(key)
            .and_then(|ids| ids.iter().copied().find(|id| Some(*id) != exclude));
        staged.or_else(|| {
            self.shard
                .active_duplicate(key)
                .filter(|id| Some(*id) != exclude && !self.staged.contains_key(id))
        })
    }

    fn record(&mut self, kind: EventKind, fact: MemoryFact, reason: Option<String>) {
        if let Some(old) = self.staged.insert(fact.id, fact.clone()) {
            if old.is_active {
                let key = dedup_key(&old);
                if let Some(ids) = self.staged_keys.get_mut(&key) {
                    ids.remove(&old.id);
                    if ids.is_empty() {
                        self.staged_keys.remove(&key);
                    }
                }
            }
        }
        if fact.is_active {
            self.staged_keys.entry(dedup_key(&fact)).or_default().insert(fact.id);
        }
        self.pending.push(Pending {
            kind,
            fact: Some(fact),
            decision: None,
            reason,
            detail: None,
        });
    }

    /// Adds an audit event that changes no fact.
    pub fn note(
        &mut self,
        kind: EventKind,
        decision: Option<EngineDecision>,
        reason: Option<String>,
        detail: Option<serde_json::Value>,
    ) {
        self.pending.push(Pending {
            kind,
            fact: None,
            decision,
            reason,
            detail,
        });
    }

    fn owned(&self, id: Uuid) -> Result<MemoryFact, StoreError> {
        self.get(id).ok_or(StoreError::UnknownFact(id))
    }

    /// Inserts a fact, or merges it into an active duplicate by raising
    /// that fact's confidence. Returns the surviving fact and whether a
    /// new one was created.
    pub fn insert(&mut self, new: NewFact, reason: Option<String>) -> Result<(MemoryFact, bool), StoreError> {
        if new.user_id != self.user {
            return Err(StoreError::Validation(ValidationReport(vec![crate::model::Violation {
                field: "user_id",
                message: format!("fact belongs to `{}`, transaction is for `{}`", new.user_id, self.user),
            }])));
        }
        let fact = MemoryFact {
            id: new.id.unwrap_or_else(|| self.store.ids.next_id()),
            user_id: new.user_id,
            scope: new.scope,
            agent_id: new.agent_id,
            flow_id: new.flow_id,
            subject: new.subject,
            relation: new.relation,
            value: new.value,
            category: new.category,
            memory_type: new.memory_type,
            confidence: new.confidence,
            access_count: 0,
            source_text: new.source_text,
            created_at: self.now,
            last_accessed_at: self.now,
            is_active: true,
        };
        let report = fact.validate();
        if !report.is_ok() {
            return Err(StoreError::Validation(report));
        }
        if let Some(existing) = self.active_duplicate(&dedup_key(&fact), None) {
            if fact.id != existing {
                self.aliases.insert(fact.id, existing);
            }
            let merged = self.merge_confidence(existing, fact.confidence, reason)?;
            return Ok((merged, false));
        }
        if self.get(fact.id).is_some() || self.new_ids.contains(&fact.id) || self.store.owner_of(fact.id).is_some() {
            return Err(StoreError::DuplicateId(fact.id));
        }
        self.new_ids.insert(fact.id);
        self.record(EventKind::FactCreated, fact.clone(), reason);
        Ok((fact, true))
    }

    fn merge_confidence(&mut self, id: Uuid, confidence: f64, reason: Option<String>) -> Result<MemoryFact, StoreError> {
        let mut fact = self.owned(id)?;
        if confidence > fact.confidence {
            fact.confidence = confidence;
            self.record(EventKind::FactUpdated, fact.clone(), reason);
        }
        Ok(fact)
    }

    /// Soft-deletes a fact; a no-op for facts already inactive.
    pub fn deactivate(&mut self, id: Uuid, reason: Option<String>) -> Result<MemoryFact, StoreError> {
        let mut fact = self.owned(id)?;
        if fact.is_active {
            fact.is_active = false;
            self.record(EventKind::FactDeactivated, fact.clone(), reason);
        }
        Ok(fact)
    }

    /// Turns an active short-term fact into a long-term one.
    pub fn promote(&mut self, id: Uuid, reason: Option<String>) -> Result<Option<MemoryFact>, StoreError> {
        let mut fact = self.owned(id)?;
        if !fact.is_active || fact.memory_type == MemoryType::LongTerm {
            return Ok(None);
        }
        fact.memory_type = MemoryType::LongTerm;
        self.record(EventKind::FactUpdated, fact.clone(), reason);
        Ok(Some(fact))
    }

    /// Counts one read of each active fact.
    pub fn touch(&mut self, ids: &[Uuid]) -> TouchReport {
        let mut report = TouchReport::default();
        for &id in ids {
            match self.get(id) {
                Some(mut fact) if fact.is_active => {
                    fact.access_count += 1;
                    fact.last_accessed_at = fact.last_accessed_at.max(self.now);
                    self.record(EventKind::FactUpdated, fact.clone(), Some("accessed".into()));
                    report.touched.push(fact);
                }
                _ => report.skipped.push(id),
            }
        }
        report
    }

    pub fn patch(&mut self, id: Uuid, patch: &FactPatch) -> Result<MemoryFact, StoreError> {
        let old = self.owned(id)?;
        let mut fact = old.clone();
        if let Some(v) = &patch.subject {
            fact.subject = v.clone();
        }
        if let Some(v) = &patch.relation {
            fact.relation = v.clone();
        }
        if let Some(v) = &patch.value {
            fact.value = v.clone();
        }
        if let Some(v) = patch.category {
            fact.category = v;
        }
        if let Some(v) = patch.memory_type {
            fact.memory_type = v;
        }
        if let Some(v) = patch.confidence {
            fact.confidence = v;
        }
        if let Some(v) = patch.is_active {
            fact.is_active = v;
        }
        let report = fact.validate();
        if !report.is_ok() {
            return Err(StoreError::Validation(report));
        }
        if fact == old {
            return Ok(fact);
        }
        if fact.is_active {
            if let Some(existing) = self.active_duplicate(&dedup_key(&fact), Some(id)) {
                return Err(StoreError::Conflict { id, existing });
            }
        }
        let only_activity = MemoryFact {
            is_active: old.is_active,
            ..fact.clone()
        } == old;
        let kind = match (only_activity, fact.is_active) {
            (true, true) => EventKind::FactReactivated,
            (true, false) => EventKind::FactDeactivated,
            (false, _) => EventKind::FactUpdated,
        };
        self.record(kind, fact.clone(), Some("edited".into()));
        Ok(fact)
    }

    /// Applies one engine decision, recording it before its effects.
    pub fn apply(&mut self, decision: &EngineDecision, report: &mut ApplyReport) -> Result<(), String> {
        let problems = decision.validate();
        if !problems.is_ok() {
            return Err(problems.to_string());
        }
        self.note(
            EventKind::DecisionApplied,
            Some(decision.clone()),
            Some(decision.reason.clone()),
            None,
        );
        let reason = Some(decision.reason.clone());
        let target = || decision.target_fact_id.expect("validated");
        let known = |tx: &Self, id: Uuid| tx.get(id).ok_or_else(|| format!("unknown target fact {id}"));
        match decision.action {
            DecisionAction::StoreShortTerm | DecisionAction::StoreLongTerm => {
                let candidate = decision.candidate.as_ref().expect("validated");
                let new = NewFact::from_candidate(
                    self.user,
                    candidate,
                    decision.category.expect("validated"),
                    decision.action.memory_type().expect("store action"),
                    decision.target_fact_id,
                );
                let (fact, created) = self.insert(new, reason).map_err(|e| e.to_string())?;
                if created {
                    report.stored.push(fact.id);
                } else {
                    report.merged.push(fact.id);
                }
            }
            DecisionAction::Retract => {
                let fact = known(self, target())?;
                self.deactivate(fact.id, reason).map_err(|e| e.to_string())?;
                report.retracted.push(fact.id);
            }
            DecisionAction::UpdateValue => {
                let mut fact = known(self, target())?;
                let candidate = decision.candidate.as_ref().expect("validated");
                fact.value = candidate.value.clone();
                fact.confidence = candidate.confidence;
                fact.source_text = candidate.source_text.clone();
                fact.last_accessed_at = fact.last_accessed_at.max(self.now);
                if fact.is_active {
                    if let Some(existing) = self.active_duplicate(&dedup_key(&fact), Some(fact.id)) {
                        return Err(format!("update of {} would duplicate active fact {existing}", fact.id));
                    }
                }
                report.updated.push(fact.id);
                self.record(EventKind::FactUpdated, fact, reason);
            }
            DecisionAction::Promote => {
                let fact = known(self, target())?;
                if self.promote(fact.id, reason).map_err(|e| e.to_string())?.is_some() {
                    report.promoted.push(fact.id);
                }
            }
            DecisionAction::Discard => {
                if let Some(id) = decision.target_fact_id {
                    let fact = known(self, id)?;
                    let confidence = decision.candidate.as_ref().map_or(0.0, |c| c.confidence);
                    self.merge_confidence(fact.id, confidence, reason).map_err(|e| e.to_string())?;
                    report.merged.push(fact.id);
                }
                report.discarded += 1;
            }
        }
        Ok(())
    }
}

impl FactStore {
    /// A store that keeps its journal in memory only.
    pub fn in_memory(clock: Arc<dyn Clock>, ids: IdSource) -> Self {
        Self {
            shards: RwLock::new(HashMap::new()),
            owners: RwLock::new(HashMap::new()),
            journal: Mutex::new(JournalState::default()),
            gate: RwLock::new(()),
            clock,
            ids,
            faults: Faults::default(),
            dir: None,
        }
    }

    /// Opens or creates a store directory holding a journal and a snapshot.
    pub fn open(dir: &Path, clock: Arc<dyn Clock>, ids: IdSource) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(|source| FileError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut store = Self::in_memory(clock, ids);
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let mut base = 0;
        if snapshot_path.exists() {
            let snapshot = read_snapshot(&snapshot_path)?;
            base = snapshot.last_sequence;
            store.load_snapshot(snapshot);
        }
        let journal_path = dir.join(JOURNAL_FILE);
        if journal_path.exists() {
            let events: Vec<JournalEvent> = read_journal(&journal_path)?
                .into_iter()
                .filter(|e| e.seq > base)
                .collect();
            store.replay(base, events)?;
        }
        let writer = JournalWriter::open(&journal_path)?;
        store.journal.get_mut().writer = Some(writer);
        store.dir = Some(dir.to_path_buf());
        Ok(store)
    }

    /// Rebuilds a store from a complete journal starting at sequence 1.
    pub fn restore(events: Vec<JournalEvent>, clock: Arc<dyn Clock>, ids: IdSource) -> Result<Self, StoreError> {
        let mut store = Self::in_memory(clock, ids);
        store.replay(0, events)?;
        Ok(store)
    }

    fn load_snapshot(&mut self, snapshot: Snapshot) {
        let journal = self.journal.get_mut();
        journal.last_seq = snapshot.last_sequence;
        journal.compacted_at = snapshot.last_sequence;
        let shards = self.shards.get_mut();
        let owners = self.owners.get_mut();
        for fact in snapshot.facts {
            owners.insert(fact.id, fact.user_id.clone());
            let shard = shards.entry(fact.user_id.clone()).or_default();
            shard.write().put(snapshot.last_sequence, fact);
        }
    }

    fn replay(&mut self, base: u64, events: Vec<JournalEvent>) -> Result<(), StoreError> {
        let mut expected = base + 1;
        for event in &events {
            if event.seq != expected {
                return Err(StoreError::Corrupt {
                    seq: event.seq,
                    message: format!("expected sequence {expected}"),
                });
            }
            expected += 1;
            if !event.kind.mutates() {
                continue;
            }
            let fact = event.fact.clone().ok_or_else(|| StoreError::Corrupt {
                seq: event.seq,
                message: "mutation event without a fact".into(),
            })?;
            if fact.user_id != event.user_id {
                return Err(StoreError::Corrupt {
                    seq: event.seq,
                    message: "fact owner differs from event user".into(),
                });
            }
            match self.owners.get_mut().get(&fact.id) {
                Some(owner) if owner != &fact.user_id => {
                    return Err(StoreError::Corrupt {
                        seq: event.seq,
                        message: format!("fact {} changes owner", fact.id),
                    })
                }
                Some(_) if event.kind == EventKind::FactCreated => {
                    return Err(StoreError::Corrupt {
                        seq: event.seq,
                        message: format!("fact {} created twice", fact.id),
                    })
                }
                None if event.kind != EventKind::FactCreated => {
                    return Err(StoreError::Corrupt {
                        seq: event.seq,
                        message: format!("fact {} changed before creation", fact.id),
                    })
                }
                _ => {}
            }
            self.owners.get_mut().insert(fact.id, fact.user_id.clone());
            let shard = self.shards.get_mut().entry(fact.user_id.clone()).or_default();
            shard.write().put(event.seq, fact);
        }
        let journal = self.journal.get_mut();
        journal.last_seq = expected - 1;
        journal.events = events;
        Ok(())
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn faults(&self) -> &Faults {
        &self.faults
    }

    pub fn directory(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn last_sequence(&self) -> u64 {
        self.journal.lock().last_seq
    }

    /// Journal events kept in memory since opening or the last compaction.
    pub fn events(&self) -> Vec<JournalEvent> {
        self.journal.lock().events.clone()
    }

    pub fn events_since(&self, seq: u64) -> Vec<JournalEvent> {
        self.journal.lock().events.iter().filter(|e| e.seq > seq).cloned().collect()
    }

    pub fn users(&self) -> Vec<String> {
        let mut users: Vec<String> = self.shards.read().keys().cloned().collect();
        users.sort();
        users
    }

    /// A fresh id from the store's id source.
    pub fn next_id(&self) -> Uuid {
        self.ids.next_id()
    }

    pub fn owner_of(&self, id: Uuid) -> Option<String> {
        self.owners.read().get(&id).cloned()
    }

    fn shard(&self, user: &str) -> Option<Arc<RwLock<UserShard>>> {
        self.shards.read().get(user).cloned()
    }

    fn shard_or_create(&self, user: &str) -> Arc<RwLock<UserShard>> {
        if let Some(s) = self.shard(user) {
            return s;
        }
        self.shards.write().entry(user.to_string()).or_default().clone()
    }

    /// Runs `f` against the user's facts and commits what it staged.
    pub fn transact<R>(
        &self,
        user: &str,
        actor: Actor,
        f: impl FnOnce(&mut Txn<'_>) -> Result<R, StoreError>,
    ) -> Result<R, StoreError> {
        self.faults.check_write()?;
        let _gate = self.gate.read();
        let shard = self.shard_or_create(user);
        let mut guard = shard.write();
        let (out, pending, new_ids) = {
            let mut txn = Txn {
                store: self,
                user,
                shard: &guard,
                actor,
                now: self.clock.now(),
                staged: BTreeMap::new(),
                staged_keys: HashMap::new(),
                new_ids: BTreeSet::new(),
                aliases: HashMap::new(),
                pending: Vec::new(),
            };
            let out = f(&mut txn)?;
            (out, txn.pending, txn.new_ids)
        };
        if pending.is_empty() {
            return Ok(out);
        }
        let mut owners = (!new_ids.is_empty()).then(|| self.owners.write());
        if let Some(owners) = &owners {
            if let Some(taken) = new_ids.iter().find(|id| owners.contains_key(id)) {
                return Err(StoreError::DuplicateId(*taken));
            }
        }
        let mut journal = self.journal.lock();
        let timestamp = self.clock.now();
        let events: Vec<JournalEvent> = pending
            .into_iter()
            .enumerate()
            .map(|(i, p)| JournalEvent {
                seq: journal.last_seq + 1 + i as u64,
                timestamp,
                kind: p.kind,
                actor,
                user_id: user.to_string(),
                fact: p.fact,
                decision: p.decision,
                reason: p.reason,
                detail: p.detail,
            })
            .collect();
        if let Some(writer) = journal.writer.as_mut() {
            writer.append(&events)?;
        }
        journal.last_seq += events.len() as u64;
        if let Some(owners) = owners.as_mut() {
            for id in &new_ids {
                owners.insert(*id, user.to_string());
            }
        }
        drop(owners);
        for e in &events {
            if let Some(fact) = &e.fact {
                guard.put(e.seq, fact.clone());
            }
        }
        journal.events.extend(events);
        Ok(out)
    }

    pub fn insert(&self, new: NewFact, actor: Actor) -> Result<MemoryFact, StoreError> {
        let user = new.user_id.clone();
        self.transact(&user, actor, |tx| tx.insert(new, None).map(|(f, _)| f))
    }

    pub fn get(&self, id: Uuid) -> Result<Option<MemoryFact>, StoreError> {
        self.faults.check_read()?;
        let Some(user) = self.owner_of(id) else {
            return Ok(None);
        };
        Ok(self.shard(&user).and_then(|s| s.read().get(&id).cloned()))
    }

    pub fn query(&self, q: &FactQuery) -> Result<FactPage, StoreError> {
        self.faults.check_read()?;
        if q.limit == Some(0) {
            return Err(StoreError::InvalidQuery("limit must be at least 1".into()));
        }
        let Some(shard) = self.shard(&q.user_id) else {
            return Ok(FactPage {
                facts: Vec::new(),
                total: 0,
                snapshot: self.last_sequence(),
            });
        };
        let guard = shard.read();
        let (snapshot, compacted_at) = {
            let j = self.journal.lock();
            (j.last_seq, j.compacted_at)
        };
        if let Some(seq) = q.as_of {
            if seq > snapshot {
                return Err(StoreError::InvalidQuery(format!("snapshot {seq} is in the future")));
            }
            if seq < compacted_at {
                return Err(StoreError::InvalidQuery(format!("snapshot {seq} predates compaction")));
            }
        }
        let mut facts = guard.select(q);
        drop(guard);
        facts.sort_by(|a, b| compare(q.order, a, b));
        let total = facts.len();
        let facts = facts
            .into_iter()
            .skip(q.offset)
            .take(q.limit.unwrap_or(usize::MAX))
            .collect();
        Ok(FactPage {
            facts,
            total,
            snapshot: q.as_of.unwrap_or(snapshot),
        })
    }

    /// Active facts of a user, in id order.
    pub fn active_facts(&self, user: &str) -> Result<Vec<MemoryFact>, StoreError> {
        self.faults.check_read()?;
        Ok(self
            .shard(user)
            .map(|s| s.read().facts().filter(|f| f.is_active).cloned().collect())
            .unwrap_or_default())
    }

    /// Applies decisions atomically. A decision that cannot be applied
    /// rejects the whole batch, and the rejection itself is journaled.
    pub fn apply_decisions(
        &self,
        user: &str,
        decisions: &[EngineDecision],
        actor: Actor,
    ) -> Result<ApplyReport, StoreError> {
        if decisions.is_empty() {
            return Ok(ApplyReport::default());
        }
        self.decide_and_apply(user, actor, |_| Ok((decisions.to_vec(), ())))
            .map(|(report, _, _)| report)
    }

    /// Hands the user's active facts to `decide` and applies the decisions
    /// it returns, all under the user's write lock, so no other write to
    /// this user can slip in between reading and applying.
    pub fn decide_and_apply<E>(
        &self,
        user: &str,
        actor: Actor,
        decide: impl FnOnce(Vec<MemoryFact>) -> Result<(Vec<EngineDecision>, E), StoreError>,
    ) -> Result<(ApplyReport, Vec<EngineDecision>, E), StoreError> {
        self.faults.check_read()?;
        let mut rejected_batch = Vec::new();
        let result = self.transact(user, actor, |tx| {
            let active = tx.facts().into_iter().filter(|f| f.is_active).collect();
            let (decisions, extra) = decide(active)?;
            let mut report = ApplyReport::default();
            for (index, d) in decisions.iter().enumerate() {
                if let Err(message) = tx.apply(d, &mut report) {
                    rejected_batch = decisions;
                    return Err(StoreError::Rejected { index, message });
                }
            }
            Ok((report, decisions, extra))
        });
        if let Err(StoreError::Rejected { index, message }) = &result {
            let detail = serde_json::json!({
                "outcome": "rejected",
                "decision_index": index,
                "decision_count": rejected_batch.len(),
                "error": message,
            });
            let decision = rejected_batch.get(*index).cloned();
            let logged = self.transact(user, actor, |tx| {
                tx.note(
                    EventKind::DecisionApplied,
                    decision,
                    Some("batch rejected".into()),
                    Some(detail),
                );
                Ok(())
            });
            if let Err(e) = logged {
                tracing::error!(user, error = %e, "could not journal rejected batch");
            }
        }
        result
    }

    pub fn touch(&self, user: &str, ids: &[Uuid], actor: Actor) -> Result<TouchReport, StoreError> {
        self.transact(user, actor, |tx| Ok(tx.touch(ids)))
    }

    pub fn deactivate(&self, id: Uuid, reason: &str, actor: Actor) -> Result<MemoryFact, StoreError> {
        let user = self.owner_of(id).ok_or(StoreError::UnknownFact(id))?;
        self.transact(&user, actor, |tx| tx.deactivate(id, Some(reason.to_string())))
    }

    pub fn patch(&self, id: Uuid, patch: &FactPatch, actor: Actor) -> Result<MemoryFact, StoreError> {
        let user = self.owner_of(id).ok_or(StoreError::UnknownFact(id))?;
        self.transact(&user, actor, |tx| tx.patch(id, patch))
    }

    /// Soft-deletes the user's active facts matching `filter`.
    pub fn clear(&self, user: &str, filter: &ClearFilter, actor: Actor) -> Result<usize, StoreError> {
        self.transact(user, actor, |tx| {
            let targets: Vec<Uuid> = tx
                .facts()
                .into_iter()
                .filter(|f| f.is_active && filter.matches(f))
                .map(|f| f.id)
                .collect();
            if targets.is_empty() {
                return Ok(0);
            }
            tx.note(
                EventKind::Cleared,
                None,
                Some("clear".into()),
                Some(serde_json::json!({ "filter": filter, "count": targets.len() })),
            );
            for id in &targets {
                tx.deactivate(*id, Some("clear".into()))?;
            }
            Ok(targets.len())
        })
    }

    /// Current state of every fact, ordered by id.
    pub fn snapshot(&self) -> Snapshot {
        let _gate = self.gate.write();
        let last_sequence = self.last_sequence();
        let shards: Vec<_> = self.shards.read().values().cloned().collect();
        let mut facts: Vec<MemoryFact> = shards
            .iter()
            .flat_map(|s| s.read().facts().cloned().collect::<Vec<_>>())
            .collect();
        facts.sort_by_key(|f| f.id);
        Snapshot { last_sequence, facts }
    }

    pub fn fact_count(&self) -> usize {
        let shards: Vec<_> = self.shards.read().values().cloned().collect();
        shards.iter().map(|s| s.read().len()).sum()
    }

    /// Writes a snapshot and truncates the journal. With `drop_inactive`,
    /// soft-deleted facts are removed for good.
    pub fn compact(&self, drop_inactive: bool) -> Result<Snapshot, StoreError> {
        let _gate = self.gate.write();
        let mut journal = self.journal.lock();
        let shards: Vec<_> = self.shards.read().values().cloned().collect();
        let mut facts = Vec::new();
        let mut dropped = Vec::new();
        for shard in &shards {
            for f in shard.read().facts() {
                if drop_inactive && !f.is_active {
                    dropped.push(f.id);
                } else {
                    facts.push(f.clone());
                }
            }
        }
        facts.sort_by_key(|f| f.id);
        let snapshot = Snapshot {
            last_sequence: journal.last_seq,
            facts,
        };
        if let Some(dir) = &self.dir {
            journal::write_snapshot(&dir.join(SNAPSHOT_FILE), &snapshot)?;
            journal::write_journal(&dir.join(JOURNAL_FILE), &[])?;
            journal.writer = Some(JournalWriter::open(&dir.join(JOURNAL_FILE))?);
        }
        {
            let mut owners = self.owners.write();
            for shard in &shards {
                let mut s = shard.write();
                for id in &dropped {
                    if owners.get(id).is_some() {
                        s.remove(id);
                    }
                }
                s.collapse_history();
            }
            for id in &dropped {
                owners.remove(id);
            }
        }
        journal.events.clear();
        journal.compacted_at = journal.last_seq;
        Ok(snapshot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};

    fn store() -> (FactStore, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2025, 3, 1, 12, 0, 0).unwrap()));
        (FactStore::in_memory(clock.clone(), IdSource::seeded(1)), clock)
    }

    fn new_fact(relation: &str, value: &str) -> NewFact {
        NewFact {
            id: None,
            user_id: "u1".into(),
            scope: Scope::User,
            agent_id: None,
            flow_id: None,
            subject: "user".into(),
            relation: relation.into(),
            value: value.into(),
            category: Category::Personal,
            memory_type: MemoryType::ShortTerm,
            confidence: 0.9,
            source_text: String::new(),
        }
    }

    #[test]
    fn insert_sets_lifecycle_fields_and_sequences() {
        let (s, clock) = store();
        let a = s.insert(new_fact("works_at", "Google"), Actor::Api).unwrap();
        let b = s.insert(new_fact("lives_in", "Toronto"), Actor::Api).unwrap();
        assert_ne!(a.id, b.id);
        assert_eq!(a.access_count, 0);
        assert!(a.is_active);
        assert_eq!(a.created_at, clock.now());
        let seqs: Vec<u64> = s.events().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, [1, 2]);
    }

    #[test]
    fn invalid_insert_is_rejected_without_events() {
        let (s, _) = store();
        let mut f = new_fact("works_at", "Google");
        f.confidence = -0.1;
        match s.insert(f, Actor::Api) {
            Err(StoreError::Validation(r)) => assert_eq!(r.fields(), ["confidence"]),
            other => panic!("{other:?}"),
        }
        assert!(s.events().is_empty());
    }

    #[test]
    fn duplicate_insert_merges() {
        let (s, _) = store();
        let a = s.insert(new_fact("works_at", "Google"), Actor::Api).unwrap();
        let mut again = new_fact("works_at", " google. ");
        again.confidence = 0.99;
        let b = s.insert(again, Actor::Api).unwrap();
        assert_eq!(a.id, b.id);
        assert_eq!(b.confidence, 0.99);
        assert_eq!(b.access_count, 0);
        assert_eq!(s.fact_count(), 1);
    }

    #[test]
    fn explicit_id_reuse_is_rejected() {
        let (s, _) = store();
        let mut f = new_fact("works_at", "Google");
        f.id = Some(Uuid::from_u128(5));
        s.insert(f.clone(), Actor::Api).unwrap();
        f.value = "Meta".into();
        assert!(matches!(s.insert(f, Actor::Api), Err(StoreError::DuplicateId(_))));
    }

    #[test]
    fn unknown_target_rejects_batch_and_is_journaled() {
        let (s, _) = store();
        let c = CandidateFact::new("user", "likes", "tea", 0.9);
        let decisions = vec![
            EngineDecision {
                action: DecisionAction::StoreLongTerm,
                target_fact_id: None,
                candidate: Some(c.clone()),
                category: Some(Category::Preference),
                reason: "r".into(),
            },
            EngineDecision {
                action: DecisionAction::Retract,
                target_fact_id: Some(Uuid::from_u128(42)),
                candidate: None,
                category: None,
                reason: "r".into(),
            },
        ];
        let err = s.apply_decisions("u1", &decisions, Actor::Engine).unwrap_err();
        assert!(matches!(err, StoreError::Rejected { index: 1, .. }), "{err}");
        assert_eq!(s.fact_count(), 0);
        let events = s.events();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].detail.as_ref().unwrap()["outcome"], "rejected");
    }

    #[test]
    fn duplicate_discard_raises_confidence() {
        let (s, _) = store();
        let f = s.insert(new_fact("works_at", "Google"), Actor::Api).unwrap();
        let d = EngineDecision {
            action: DecisionAction::Discard,
            target_fact_id: Some(f.id),
            candidate: Some(CandidateFact::new("user", "works_at", "Google", 0.99)),
            category: Some(Category::Personal),
            reason: "duplicate".into(),
        };
        let report = s.apply_decisions("u1", &[d], Actor::Engine).unwrap();
        assert_eq!(report.discarded, 1);
        let now = s.get(f.id).unwrap().unwrap();
        assert_eq!(now.confidence, 0.99);
        assert_eq!(now.access_count, 0);
    }

    #[test]
    fn touch_skips_inactive_and_unknown() {
        let (s, clock) = store();
        let a = s.insert(new_fact("works_at", "Google"), Actor::Api).unwrap();
        let b = s.insert(new_fact("lives_in", "Toronto"), Actor::Api).unwrap();
        s.deactivate(b.id, "test", Actor::Api).unwrap();
        clock.advance(Duration::minutes(5));
        let r = s.touch("u1", &[a.id, b.id, Uuid::from_u128(9)], Actor::Engine).unwrap();
        assert_eq!(r.touched.len(), 1);
        assert_eq!(r.touched[0].access_count, 1);
        assert_eq!(r.touched[0].last_accessed_at, clock.now());
        assert_eq!(r.skipped, vec![b.id, Uuid::from_u128(9)]);
    }

    #[test]
    fn clear_honors_scope() {
        let (s, _) = store();
        s.insert(new_fact("works_at", "Google"), Actor::Api).unwrap();
        let mut agent = new_fact("prefers", "bullet points");
        agent.scope = Scope::Agent;
        agent.agent_id = Some("a1".into());
        s.insert(agent, Actor::Api).unwrap();
        let filter = ClearFilter {
            scope: Some(Scope::Agent),
            ..Default::default()
        };
        assert_eq!(s.clear("u1", &filter, Actor::Api).unwrap(), 1);
        let active = s.active_facts("u1").unwrap();
        assert_eq!(active.len(), 1);
        assert_eq!(active[0].scope, Scope::User);
        assert_eq!(s.clear("nobody", &ClearFilter::default(), Actor::Api).unwrap(), 0);
    }

    #[test]
    fn deactivated_fact_is_visible_as_inactive() {
        let (s, _) = store();
        let a = s.insert(new_fact("works_at", "Google"), Actor::Api).unwrap();
        s.deactivate(a.id, "test", Actor::Api).unwrap();
        let q = FactQuery {
            active: ActiveFilter::Inactive,
            ..FactQuery::user("u1")
        };
        let page = s.query(&q).unwrap();
        assert_eq!(page.facts.len(), 1);
        assert!(!page.facts[0].is_active);
    }

    #[test]
    fn patch_conflict_and_reactivation() {
        let (s, _) = store();
        let a = s.insert(new_fact("lives_in", "Toronto"), Actor::Api).unwrap();
        let b = s.insert(new_fact("lives_in", "Ottawa"), Actor::Api).unwrap();
        let to_toronto = FactPatch {
            value: Some("toronto".into()),
            ..Default::default()
        };
        assert!(matches!(s.patch(b.id, &to_toronto, Actor::Api), Err(StoreError::Conflict { .. })));
        s.deactivate(a.id, "x", Actor::Api).unwrap();
        s.patch(b.id, &to_toronto, Actor::Api).unwrap();
        let reactivate = FactPatch {
            is_active: Some(true),
            ..Default::default()
        };
        assert!(matches!(s.patch(a.id, &reactivate, Actor::Api), Err(StoreError::Conflict { .. })));
        let bad = FactPatch {
            confidence: Some(1.5),
            ..Default::default()
        };
        assert!(matches!(s.patch(a.id, &bad, Actor::Api), Err(StoreError::Validation(_))));
        let last = s.events().last().cloned().unwrap();
        assert_eq!((last.kind, last.actor), (EventKind::FactUpdated, Actor::Api));
    }

    #[test]
    fn restore_reproduces_state_and_rejects_gaps() {
        let (s, _) = store();
        let a = s.insert(new_fact("works_at", "Google"), Actor::Api).unwrap();
        s.touch("u1", &[a.id], Actor::Engine).unwrap();
        s.deactivate(a.id, "x", Actor::Api).unwrap();
        let events = s.events();
        let restored = FactStore::restore(events.clone(), Arc::new(SystemClock), IdSource::Random).unwrap();
        assert_eq!(
            serde_json::to_string(&restored.snapshot()).unwrap(),
            serde_json::to_string(&s.snapshot()).unwrap()
        );
        let mut gap = events;
        gap.remove(1);
        match FactStore::restore(gap, Arc::new(SystemClock), IdSource::Random) {
            Err(StoreError::Corrupt { seq, message }) => {
                assert_eq!(seq, 3);
                assert!(message.contains("expected sequence 2"));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            FactStore::restore(vec![], Arc::new(SystemClock), IdSource::Random)
                .unwrap()
                .fact_count(),
            0
        );
    }

    #[test]
    fn as_of_pages_ignore_later_writes() {
        let (s, _) = store();
        for v in ["a", "b", "c"] {
            s.insert(new_fact("likes", v), Actor::Api).unwrap();
        }
        let first = s
            .query(&FactQuery {
                limit: Some(2),
                ..FactQuery::user("u1")
            })
            .unwrap();
        s.insert(new_fact("likes", "0"), Actor::Api).unwrap();
        let second = s
            .query(&FactQuery {
                limit: Some(2),
                offset: 2,
                as_of: Some(first.snapshot),
                ..FactQuery::user("u1")
            })
            .unwrap();
        assert_eq!(first.total, 3);
        assert_eq!(second.total, 3);
        let mut seen: Vec<Uuid> = first.facts.iter().chain(&second.facts).map(|f| f.id).collect();
        seen.dedup();
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn faults_block_reads_and_writes() {
        let (s, _) = store();
        s.faults().fail_reads(true);
        assert!(matches!(s.query(&FactQuery::user("u1")), Err(StoreError::Unavailable(_))));
        s.faults().fail_reads(false);
        s.faults().fail_writes(true);
        assert!(s.insert(new_fact("likes", "tea"), Actor::Api).is_err());
        assert_eq!(s.fact_count(), 0);
    }

    #[test]
    fn reopen_and_compact() {
        let dir = tempfile::tempdir().unwrap();
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        let live = {
            let s = FactStore::open(dir.path(), clock.clone(), IdSource::Random).unwrap();
            let a = s.insert(new_fact("works_at", "Google"), Actor::Cli).unwrap();
            s.insert(new_fact("lives_in", "Toronto"), Actor::Cli).unwrap();
            s.deactivate(a.id, "x", Actor::Cli).unwrap();
            s.snapshot()
        };
        let s = FactStore::open(dir.path(), clock.clone(), IdSource::Random).unwrap();
        assert_eq!(s.snapshot(), live);
        s.compact(true).unwrap();
        s.insert(new_fact("likes", "tea"), Actor::Cli).unwrap();
        let after = s.snapshot();
        assert_eq!(after.facts.len(), 2);
        let reopened = FactStore::open(dir.path(), clock, IdSource::Random).unwrap();
        assert_eq!(reopened.snapshot(), after);
        assert_eq!(reopened.last_sequence(), 4);
    }
}
