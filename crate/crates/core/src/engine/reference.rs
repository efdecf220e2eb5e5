//! Procedural restatement of the default rule pack.
//!
//! These functions compute the same decisions as the default pack without
//! going through the rule engine. They are used to cross-check the engine
//! and as a readable statement of what the default rules do.

use chrono::DateTime;
use uuid::Uuid;

use super::provisional_id;
use crate::model::{CandidateFact, Category, DecisionAction, EngineDecision, MemoryFact, MemoryType};
use crate::rules::RelationPolicy;

/// Candidates below this confidence are discarded before reconciliation.
pub const CONFIDENCE_FLOOR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConflictKind {
    None,
    /// An active fact already holds the same entity.
    Duplicate,
    /// A single-valued relation holds a different entity.
    Contradiction,
    /// The candidate negates existing facts.
    NegationMatch,
    /// A multi-valued relation gains another value.
    MultiValueNew,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConflictReport {
    pub kind: ConflictKind,
    /// Facts involved, in the order they were given.
    pub fact_ids: Vec<Uuid>,
}

impl ConflictReport {
    fn none(kind: ConflictKind) -> Self {
        Self { kind, fact_ids: Vec::new() }
    }
}

pub fn classify_candidate(candidate: &CandidateFact, policy: &RelationPolicy) -> Category {
    policy.category_of(&candidate.relation)
}

/// Compares a candidate with the active facts of its scope.
pub fn detect_conflict(candidate: &CandidateFact, existing: &[MemoryFact], policy: &RelationPolicy) -> ConflictReport {
    let key = candidate.scope_key();
    let peers: Vec<&MemoryFact> = existing
        .iter()
        .filter(|f| f.is_active && f.subject == candidate.subject && f.scope_key() == key)
        .collect();

    if let Some(dup) = peers
        .iter()
        .find(|f| f.relation == candidate.relation && policy.same_entity(&candidate.value, &f.value))
    {
        return ConflictReport {
            kind: ConflictKind::Duplicate,
            fact_ids: vec![dup.id],
        };
    }

    if policy.is_negation(&candidate.relation) {
        let fact_ids: Vec<Uuid> = peers
            .iter()
            .filter(|f| {
                !policy.is_negation(&f.relation)
                    && policy.negation_may_target(&candidate.relation, &f.relation)
                    && policy.same_entity(&candidate.value, &f.value)
            })
            .map(|f| f.id)
            .collect();
        if fact_ids.is_empty() {
            return ConflictReport::none(ConflictKind::None);
        }
        return ConflictReport {
            kind: ConflictKind::NegationMatch,
            fact_ids,
        };
    }

    if policy.is_multi_valued(&candidate.relation) {
        return ConflictReport::none(ConflictKind::MultiValueNew);
    }

    let fact_ids: Vec<Uuid> = peers
        .iter()
        .filter(|f| f.relation == candidate.relation)
        .map(|f| f.id)
        .collect();
    if fact_ids.is_empty() {
        ConflictReport::none(ConflictKind::None)
    } else {
        ConflictReport {
            kind: ConflictKind::Contradiction,
            fact_ids,
        }
    }
}

/// Decisions for one candidate given its category and conflict report.
///
/// `new_id` is the id a stored fact receives.
pub fn decide_storage(
    candidate: &CandidateFact,
    category: Category,
    conflict: &ConflictReport,
    policy: &RelationPolicy,
    new_id: Uuid,
) -> Vec<EngineDecision> {
    let decision = |action, target, category, reason: String| EngineDecision {
        action,
        target_fact_id: target,
        candidate: Some(candidate.clone()),
        category,
        reason,
    };
    let what = format!("{} {}", candidate.relation, candidate.value);

    if candidate.confidence < CONFIDENCE_FLOOR {
        return vec![decision(DecisionAction::Discard, None, None, format!("{what} is below the confidence floor"))];
    }

    let mut out = Vec::new();
    match conflict.kind {
        ConflictKind::Duplicate => {
            out.push(decision(
                DecisionAction::Discard,
                conflict.fact_ids.first().copied(),
                Some(category),
                format!("{what} duplicates an active fact"),
            ));
            return out;
        }
        ConflictKind::NegationMatch | ConflictKind::Contradiction => {
            for &id in &conflict.fact_ids {
                out.push(decision(DecisionAction::Retract, Some(id), None, format!("{what} replaces {id}")));
            }
        }
        ConflictKind::None | ConflictKind::MultiValueNew => {}
    }

    if policy.is_negation(&candidate.relation) {
        out.push(decision(DecisionAction::Discard, None, Some(category), format!("negation {what} is not stored")));
        return out;
    }

    let long_term = conflict.kind == ConflictKind::Contradiction || policy.is_auto_long_term(category);
    let action = if long_term {
        DecisionAction::StoreLongTerm
    } else {
        DecisionAction::StoreShortTerm
    };
    out.push(decision(action, Some(new_id), Some(category), format!("{what} stored")));
    out
}

/// Full decision list for a session, candidates processed in order.
pub fn reference_session(
    user_id: &str,
    request_key: &str,
    existing: &[MemoryFact],
    candidates: &[CandidateFact],
    policy: &RelationPolicy,
) -> Vec<EngineDecision> {
    let mut facts: Vec<MemoryFact> = existing.to_vec();
    let mut out = Vec::new();
    for (position, c) in candidates.iter().enumerate() {
        let category = classify_candidate(c, policy);
        let conflict = detect_conflict(c, &facts, policy);
        let id = provisional_id(request_key, position);
        let decisions = decide_storage(c, category, &conflict, policy, id);
        for d in &decisions {
            match d.action {
                DecisionAction::Retract => {
                    if let Some(f) = facts.iter_mut().find(|f| Some(f.id) == d.target_fact_id) {
                        f.is_active = false;
                    }
                }
                DecisionAction::StoreShortTerm | DecisionAction::StoreLongTerm => {
                    facts.push(MemoryFact {
                        id,
                        user_id: user_id.to_string(),
                        scope: c.scope,
                        agent_id: c.agent_id.clone(),
                        flow_id: c.flow_id.clone(),
                        subject: c.subject.clone(),
                        relation: c.relation.clone(),
                        value: c.value.clone(),
                        category,
                        memory_type: d.action.memory_type().unwrap_or(MemoryType::ShortTerm),
                        confidence: c.confidence,
                        access_count: 0,
                        source_text: c.source_text.clone(),
                        created_at: DateTime::UNIX_EPOCH,
                        last_accessed_at: DateTime::UNIX_EPOCH,
                        is_active: true,
                    });
                }
                _ => {}
            }
        }
        out.extend(decisions);
    }
    out
}
