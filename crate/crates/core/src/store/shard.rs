//! One user's facts with their version history and secondary indexes.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use uuid::Uuid;

use super::query::FactQuery;
use crate::entity::normalize_entity;
use crate::model::{Category, MemoryFact, Scope};

/// Identity used for duplicate merging: scope, subject, relation and the
/// normalized value.
pub type DedupKey = (String, String, String, String);

pub fn dedup_key(f: &MemoryFact) -> DedupKey {
    (
        f.scope_key(),
        f.subject.clone(),
        f.relation.clone(),
        normalize_entity(&f.value),
    )
}

#[derive(Debug, Clone)]
pub(crate) struct FactEntry {
    /// (journal sequence, fact after that event), oldest first.
    versions: Vec<(u64, MemoryFact)>,
}

impl FactEntry {
    pub fn current(&self) -> &MemoryFact {
        &self.versions.last().expect("entries are never empty").1
    }

    pub fn at(&self, seq: u64) -> Option<&MemoryFact> {
        self.versions.iter().rev().find(|(s, _)| *s <= seq).map(|(_, f)| f)
    }
}

#[derive(Debug, Default)]
pub(crate) struct UserShard {
    entries: BTreeMap<Uuid, FactEntry>,
    by_scope: HashMap<String, BTreeSet<Uuid>>,
    by_category: HashMap<Category, BTreeSet<Uuid>>,
    by_subject_relation: HashMap<(String, String), BTreeSet<Uuid>>,
    active_keys: HashMap<DedupKey, Uuid>,
}

fn unindex<K: std::hash::Hash + Eq>(map: &mut HashMap<K, BTreeSet<Uuid>>, key: K, id: &Uuid) {
    if let Some(set) = map.get_mut(&key) {
        set.remove(id);
        if set.is_empty() {
            map.remove(&key);
        }
    }
}

impl UserShard {
    pub fn get(&self, id: &Uuid) -> Option<&MemoryFact> {
        self.entries.get(id).map(FactEntry::current)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn facts(&self) -> impl Iterator<Item = &MemoryFact> {
        self.entries.values().map(FactEntry::current)
    }

    pub fn active_duplicate(&self, key: &DedupKey) -> Option<Uuid> {
        self.active_keys.get(key).copied()
    }

    /// Records `fact` as the state after event `seq`.
    pub fn put(&mut self, seq: u64, fact: MemoryFact) {
        let id = fact.id;
        if let Some(old) = self.entries.get(&id).map(|e| e.current().clone()) {
            unindex(&mut self.by_scope, old.scope_key(), &id);
            unindex(&mut self.by_category, old.category, &id);
            unindex(&mut self.by_subject_relation, (old.subject.clone(), old.relation.clone()), &id);
            if old.is_active {
                let key = dedup_key(&old);
                if self.active_keys.get(&key) == Some(&id) {
                    self.active_keys.remove(&key);
                }
            }
        }
        self.by_scope.entry(fact.scope_key()).or_default().insert(id);
        self.by_category.entry(fact.category).or_default().insert(id);
        self.by_subject_relation
            .entry((fact.subject.clone(), fact.relation.clone()))
            .or_default()
            .insert(id);
        if fact.is_active {
            self.active_keys.insert(dedup_key(&fact), id);
        }
        self.entries
            .entry(id)
            .or_insert_with(|| FactEntry { versions: Vec::new() })
            .versions
            .push((seq, fact));
    }

    /// Drops version history older than the current state.
    pub fn collapse_history(&mut self) {
        for entry in self.entries.values_mut() {
            let last = entry.versions.pop().expect("entries are never empty");
            entry.versions = vec![last];
        }
    }

    pub fn remove(&mut self, id: &Uuid) {
        if let Some(entry) = self.entries.remove(id) {
            let old = entry.current();
            unindex(&mut self.by_scope, old.scope_key(), id);
            unindex(&mut self.by_category, old.category, id);
            unindex(&mut self.by_subject_relation, (old.subject.clone(), old.relation.clone()), id);
        }
    }

    /// Facts matching `q`, unordered, at `q.as_of` when set.
    pub fn select(&self, q: &FactQuery) -> Vec<MemoryFact> {
        let indexed: Option<&BTreeSet<Uuid>> = if q.as_of.is_some() {
            // Indexes describe the live state only.
            None
        } else if let (Some(s), Some(r)) = (&q.subject, &q.relation) {
            Some(self.by_subject_relation.get(&(s.clone(), r.clone())).unwrap_or(&EMPTY))
        } else if let Some(key) = scope_key_of(q) {
            Some(self.by_scope.get(&key).unwrap_or(&EMPTY))
        } else if let Some(c) = q.category {
            Some(self.by_category.get(&c).unwrap_or(&EMPTY))
        } else {
            None
        };
        let version = |e: &'_ FactEntry| -> Option<MemoryFact> {
            let f = match q.as_of {
                Some(seq) => e.at(seq)?,
                None => e.current(),
            };
            q.matches(f).then(|| f.clone())
        };
        match indexed {
            Some(ids) => ids.iter().filter_map(|id| self.entries.get(id)).filter_map(version).collect(),
            None => self.entries.values().filter_map(version).collect(),
        }
    }
}

static EMPTY: BTreeSet<Uuid> = BTreeSet::new();

fn scope_key_of(q: &FactQuery) -> Option<String> {
    match (q.scope, &q.agent_id, &q.flow_id) {
        (Some(Scope::User), None, None) => Some("user".into()),
        (Some(Scope::Agent) | None, Some(a), None) => Some(format!("agent:{a}")),
        (Some(Scope::Flow) | None, None, Some(f)) => Some(format!("flow:{f}")),
        _ => None,
    }
}
