//! Forward-chaining session runner.
//!
//! Each write request gets a fresh working memory holding the user's
//! active facts and, one at a time in input order, each candidate. For a
//! candidate the classify, reconcile and lifecycle phases run in turn; in a
//! phase the engine repeatedly fires the best unfired activation (highest
//! salience, then earliest rule, then lowest working-memory tuple) until the
//! phase is quiescent or the candidate is settled by a store, discard or
//! update decision. Stored candidates stay in working memory as memory
//! facts so later candidates reconcile against them.

pub mod reference;
mod wm;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;
use sha2::{Digest, Sha256};
use uuid::Uuid;

pub use reference::{classify_candidate, decide_storage, detect_conflict, ConflictKind, ConflictReport};
pub use wm::{Value, Wme};

use crate::entity::{levenshtein_similarity, normalize_entity};
use crate::model::{
    CandidateFact, Category, DecisionAction, EngineDecision, MemoryFact, PromptContext, Validate, ValidationReport,
};
use crate::rules::{Action, CategoryExpr, Condition, Pattern, Phase, Predicate, RuleDef, RulePack, Term, TestExpr};

/// Rule firings allowed per session before the engine gives up.
pub const FIRING_LIMIT: usize = 10_000;

/// Reason attached to every decision of a degraded session.
pub const FALLBACK_REASON: &str = "engine-fallback";

/// Inputs of one isolated session.
#[derive(Debug, Clone)]
pub struct SessionInput {
    pub user_id: String,
    /// Unique per request; seeds the ids of facts the session stores.
    pub request_key: String,
    pub existing: Vec<MemoryFact>,
    pub candidates: Vec<CandidateFact>,
    pub context: Option<PromptContext>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub rule: String,
    pub phase: &'static str,
    pub candidate: usize,
    pub facts: Vec<String>,
    pub bindings: BTreeMap<String, String>,
    /// Indices into the decision list produced by this firing.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub decisions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub decisions: Vec<EngineDecision>,
    pub trace: Vec<TraceRecord>,
    /// Set when the pack failed at runtime and the fallback was used.
    pub degraded: Option<String>,
}

/// Inputs that violate the session contract.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("fact {id} belongs to user `{owner}`, not `{user}`")]
    ForeignFact { id: Uuid, owner: String, user: String },
    #[error("fact {0} is not active")]
    InactiveFact(Uuid),
    #[error("existing fact {id} is invalid: {report}")]
    InvalidFact { id: Uuid, report: ValidationReport },
    #[error("candidate {index} is invalid: {report}")]
    InvalidCandidate { index: usize, report: ValidationReport },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
enum Failure {
    #[error("rule firing limit of {0} exceeded")]
    FiringLimit(usize),
    #[error("rule `{rule}`: {message}")]
    Rule { rule: String, message: String },
    #[error("candidate {0} was not settled by any rule")]
    Unsettled(usize),
}

/// Deterministic v4-shaped id for a fact stored by a session.
pub fn provisional_id(request_key: &str, position: usize) -> Uuid {
    let mut h = Sha256::new();
    h.update(request_key.as_bytes());
    h.update([0]);
    h.update((position as u64).to_be_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 16];
    bytes.copy_from_slice(&digest[..16]);
    uuid::Builder::from_random_bytes(bytes).into_uuid()
}

type Bindings = BTreeMap<String, Value>;

struct Activation {
    rule: usize,
    tuple: Vec<usize>,
    bindings: Bindings,
}

struct Session<'a> {
    input: &'a SessionInput,
    pack: &'a RulePack,
    wm: Vec<Option<Wme>>,
    fired: HashSet<(usize, Vec<usize>)>,
    firings: usize,
    decisions: Vec<EngineDecision>,
    trace: Vec<TraceRecord>,
    normalized: RefCell<HashMap<String, String>>,
    /// Rules per phase, ordered by salience desc then definition order.
    agenda_order: BTreeMap<Phase, Vec<usize>>,
}

struct Focus {
    position: usize,
    wme: usize,
    category: Option<Category>,
    settled: bool,
}

impl<'a> Session<'a> {
    fn new(input: &'a SessionInput, pack: &'a RulePack) -> Self {
        let mut wm: Vec<Option<Wme>> = input.existing.iter().map(|f| Some(Wme::from_memory_fact(f))).collect();
        if let Some(ctx) = &input.context {
            wm.push(Some(Wme::from_prompt_context(ctx)));
        }
        let agenda_order = Phase::ORDER
            .into_iter()
            .map(|phase| {
                let mut idx: Vec<usize> = pack.rules_in(phase).map(|(i, _)| i).collect();
                idx.sort_by_key(|&i| (std::cmp::Reverse(pack.rules[i].salience), i));
                (phase, idx)
            })
            .collect();
        Self {
            input,
            pack,
            wm,
            fired: HashSet::new(),
            firings: 0,
            decisions: Vec::new(),
            trace: Vec::new(),
            normalized: RefCell::new(HashMap::new()),
            agenda_order,
        }
    }

    fn run(&mut self) -> Result<(), Failure> {
        for (position, candidate) in self.input.candidates.iter().enumerate() {
            self.wm.push(Some(Wme::from_candidate(position, candidate)));
            let mut focus = Focus {
                position,
                wme: self.wm.len() - 1,
                category: None,
                settled: false,
            };
            for phase in Phase::ORDER {
                while !focus.settled {
                    match self.next_activation(phase)? {
                        Some(act) => self.fire(act, &mut focus)?,
                        None => break,
                    }
                }
                if focus.settled {
                    break;
                }
            }
            if !focus.settled {
                return Err(Failure::Unsettled(position));
            }
            self.wm[focus.wme] = None;
            if let Some(last) = self.decisions.last() {
                if let (Some(mt), Some(id), Some(cat)) =
                    (last.action.memory_type(), last.target_fact_id, last.category)
                {
                    self.wm.push(Some(Wme::memory_fact(
                        id.to_string(),
                        &candidate.subject,
                        &candidate.relation,
                        &candidate.value,
                        candidate.confidence,
                        candidate.scope.as_str(),
                        candidate.scope_key(),
                        cat.as_str(),
                        mt.as_str(),
                        0,
                    )));
                }
            }
        }
        Ok(())
    }

    fn next_activation(&self, phase: Phase) -> Result<Option<Activation>, Failure> {
        for &rule_idx in &self.agenda_order[&phase] {
            let rule = &self.pack.rules[rule_idx];
            let mut tuple = Vec::new();
            let mut bindings = Bindings::new();
            if let Some((tuple, bindings)) = self.first_match(rule_idx, rule, 0, &mut tuple, &mut bindings)? {
                return Ok(Some(Activation {
                    rule: rule_idx,
                    tuple,
                    bindings,
                }));
            }
        }
        Ok(None)
    }

    /// First unfired match of `rule` in working-memory order.
    fn first_match(
        &self,
        rule_idx: usize,
        rule: &RuleDef,
        cond: usize,
        tuple: &mut Vec<usize>,
        bindings: &mut Bindings,
    ) -> Result<Option<(Vec<usize>, Bindings)>, Failure> {
        let Some(condition) = rule.conditions.get(cond) else {
            if self.fired.contains(&(rule_idx, tuple.clone())) {
                return Ok(None);
            }
            return Ok(Some((tuple.clone(), bindings.clone())));
        };
        match condition {
            Condition::Match(pattern) => {
                for (id, wme) in self.live(&pattern.template) {
                    let mut local = bindings.clone();
                    if unify(pattern, wme, &mut local) {
                        tuple.push(id);
                        let found = self.first_match(rule_idx, rule, cond + 1, tuple, &mut local)?;
                        tuple.pop();
                        if found.is_some() {
                            return Ok(found);
                        }
                    }
                }
                Ok(None)
            }
            Condition::NotExists(pattern) => {
                let exists = self.live(&pattern.template).any(|(_, wme)| {
                    let mut local = bindings.clone();
                    unify(pattern, wme, &mut local)
                });
                if exists {
                    Ok(None)
                } else {
                    self.first_match(rule_idx, rule, cond + 1, tuple, bindings)
                }
            }
            Condition::Test(test) => {
                if self.eval(rule, test, bindings)? {
                    self.first_match(rule_idx, rule, cond + 1, tuple, bindings)
                } else {
                    Ok(None)
                }
            }
        }
    }

    fn live<'s>(&'s self, template: &'s str) -> impl Iterator<Item = (usize, &'s Wme)> + 's {
        self.wm
            .iter()
            .enumerate()
            .filter_map(move |(i, w)| w.as_ref().filter(|w| w.template == template).map(|w| (i, w)))
    }

    fn normalized(&self, raw: &str) -> String {
        if let Some(n) = self.normalized.borrow().get(raw) {
            return n.clone();
        }
        let n = normalize_entity(raw);
        self.normalized.borrow_mut().insert(raw.to_string(), n.clone());
        n
    }

    fn eval(&self, rule: &RuleDef, test: &TestExpr, bindings: &Bindings) -> Result<bool, Failure> {
        let fail = |message: String| Failure::Rule {
            rule: rule.name.clone(),
            message,
        };
        let args: Vec<Value> = test
            .args
            .iter()
            .map(|t| match t {
                Term::Var(v) => bindings.get(v).cloned().ok_or_else(|| fail(format!("?{v} is unbound"))),
                Term::Literal(l) => Ok(Value::from(l)),
                Term::Wildcard => Err(fail("wildcard in test".into())),
            })
            .collect::<Result<_, _>>()?;
        let policy = &self.pack.policy;
        let numeric = |i: usize| {
            args[i]
                .number()
                .ok_or_else(|| fail(format!("{} expects numbers, got `{}`", test.predicate.name(), args[i])))
        };
        let result = match test.predicate {
            Predicate::Lt => numeric(0)? < numeric(1)?,
            Predicate::Le => numeric(0)? <= numeric(1)?,
            Predicate::Gt => numeric(0)? > numeric(1)?,
            Predicate::Ge => numeric(0)? >= numeric(1)?,
            Predicate::Eq => args[0].same(&args[1]),
            Predicate::Neq => !args[0].same(&args[1]),
            Predicate::SameEntity => {
                let a = self.normalized(&args[0].text());
                let b = self.normalized(&args[1].text());
                levenshtein_similarity(&a, &b) >= policy.similarity_threshold
            }
            Predicate::MultiValued => policy.is_multi_valued(&args[0].text()),
            Predicate::SingleValued => !policy.is_multi_valued(&args[0].text()),
            Predicate::NegationRelation => policy.is_negation(&args[0].text()),
            Predicate::NegationTarget => policy.negation_may_target(&args[0].text(), &args[1].text()),
            Predicate::AutoLongTerm => {
                let text = args[0].text();
                match text.parse::<Category>() {
                    Ok(c) => policy.is_auto_long_term(c),
                    Err(_) => false,
                }
            }
        };
        Ok(result != test.negated)
    }

    fn fire(&mut self, act: Activation, focus: &mut Focus) -> Result<(), Failure> {
        self.firings += 1;
        if self.firings > FIRING_LIMIT {
            return Err(Failure::FiringLimit(FIRING_LIMIT));
        }
        let rule = &self.pack.rules[act.rule];
        self.fired.insert((act.rule, act.tuple.clone()));
        let fail = |message: String| Failure::Rule {
            rule: rule.name.clone(),
            message,
        };
        let candidate = &self.input.candidates[focus.position];
        let first_decision = self.decisions.len();

        for action in &rule.actions {
            match action {
                Action::SetCategory(expr) => {
                    let category = match expr {
                        CategoryExpr::Literal(c) => *c,
                        CategoryExpr::OfRelation(v) => self.pack.policy.category_of(&act.bindings[v].text()),
                    };
                    focus.category = Some(category);
                    if let Some(w) = self.wm[focus.wme].as_mut() {
                        w.set("category", Value::sym(category.as_str()));
                    }
                }
                Action::BindRetraction { target, reason } => {
                    let id = self.fact_wme(&act.bindings[target]).ok_or_else(|| {
                        fail(format!("?{target} does not name a fact in working memory"))
                    })?;
                    let fact_id = parse_fact_id(&self.wm[id]).map_err(&fail)?;
                    self.wm[id] = None;
                    if let Some(w) = self.wm[focus.wme].as_mut() {
                        w.set("revises", Value::sym("yes"));
                    }
                    self.decisions.push(EngineDecision {
                        action: DecisionAction::Retract,
                        target_fact_id: Some(fact_id),
                        candidate: Some(candidate.clone()),
                        category: None,
                        reason: interpolate(reason, &act.bindings),
                    });
                }
                Action::MarkDuplicate { target, reason } => {
                    if focus.settled {
                        return Err(fail("candidate settled twice".into()));
                    }
                    let id = self.fact_wme(&act.bindings[target]).ok_or_else(|| {
                        fail(format!("?{target} does not name a fact in working memory"))
                    })?;
                    let fact_id = parse_fact_id(&self.wm[id]).map_err(&fail)?;
                    self.decisions.push(EngineDecision {
                        action: DecisionAction::Discard,
                        target_fact_id: Some(fact_id),
                        candidate: Some(candidate.clone()),
                        category: focus.category,
                        reason: interpolate(reason, &act.bindings),
                    });
                    focus.settled = true;
                }
                Action::AssertDecision { action, target, reason } => {
                    if focus.settled {
                        return Err(fail("candidate settled twice".into()));
                    }
                    let reason = interpolate(reason, &act.bindings);
                    let decision = match action {
                        DecisionAction::StoreShortTerm | DecisionAction::StoreLongTerm => {
                            let category = focus
                                .category
                                .ok_or_else(|| fail("store decision before classification".into()))?;
                            EngineDecision {
                                action: *action,
                                target_fact_id: Some(provisional_id(&self.input.request_key, focus.position)),
                                candidate: Some(candidate.clone()),
                                category: Some(category),
                                reason,
                            }
                        }
                        DecisionAction::Discard => EngineDecision {
                            action: DecisionAction::Discard,
                            target_fact_id: None,
                            candidate: Some(candidate.clone()),
                            category: focus.category,
                            reason,
                        },
                        DecisionAction::UpdateValue => {
                            let var = target.as_deref().ok_or_else(|| fail("update_value without target".into()))?;
                            let id = self
                                .fact_wme(&act.bindings[var])
                                .ok_or_else(|| fail(format!("?{var} does not name a fact in working memory")))?;
                            let fact_id = parse_fact_id(&self.wm[id]).map_err(&fail)?;
                            if let Some(w) = self.wm[id].as_mut() {
                                w.set("value", Value::Str(candidate.value.clone()));
                                w.set("confidence", Value::Float(candidate.confidence));
                            }
                            EngineDecision {
                                action: DecisionAction::UpdateValue,
                                target_fact_id: Some(fact_id),
                                candidate: Some(candidate.clone()),
                                category: focus.category,
                                reason,
                            }
                        }
                        other => return Err(fail(format!("`{other}` cannot be asserted"))),
                    };
                    self.decisions.push(decision);
                    focus.settled = true;
                }
            }
        }

        self.trace.push(TraceRecord {
            rule: rule.name.clone(),
            phase: rule.phase.as_str(),
            candidate: focus.position,
            facts: act
                .tuple
                .iter()
                .filter_map(|&i| self.wm[i].as_ref().map(Wme::label).or_else(|| Some(format!("retracted#{i}"))))
                .collect(),
            bindings: act.bindings.iter().map(|(k, v)| (k.clone(), v.text().into_owned())).collect(),
            decisions: (first_decision..self.decisions.len()).collect(),
        });
        Ok(())
    }

    /// Working-memory index of the live memory fact whose id equals `value`.
    fn fact_wme(&self, value: &Value) -> Option<usize> {
        let wanted = value.text();
        self.live(wm::MEMORY_FACT)
            .find(|(_, w)| w.get("fact-id").is_some_and(|id| id.text() == wanted))
            .map(|(i, _)| i)
    }
}

fn parse_fact_id(wme: &Option<Wme>) -> Result<Uuid, String> {
    let text = wme
        .as_ref()
        .and_then(|w| w.get("fact-id"))
        .map(|v| v.text().into_owned())
        .unwrap_or_default();
    Uuid::parse_str(&text).map_err(|_| format!("`{text}` is not a fact id"))
}

fn unify(pattern: &Pattern, wme: &Wme, bindings: &mut Bindings) -> bool {
    static NIL: Value = Value::Sym(String::new());
    for test in &pattern.tests {
        let value = wme.get(&test.slot).unwrap_or(&NIL);
        match &test.term {
            Term::Wildcard => {}
            Term::Literal(l) => {
                if !value.same(&Value::from(l)) {
                    return false;
                }
            }
            Term::Var(v) => match bindings.get(v) {
                Some(bound) => {
                    if !bound.same(value) {
                        return false;
                    }
                }
                None => {
                    bindings.insert(v.clone(), value.clone());
                }
            },
        }
    }
    true
}

/// Replaces `?name` with the bound value's text.
fn interpolate(template: &str, bindings: &Bindings) -> String {
    let mut out = String::with_capacity(template.len());
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        if c != '?' {
            out.push(c);
            continue;
        }
        let mut name = String::new();
        while let Some(&n) = chars.peek() {
            if n.is_ascii_alphanumeric() || n == '_' || n == '-' {
                name.push(n);
                chars.next();
            } else {
                break;
            }
        }
        match bindings.get(&name) {
            Some(v) if !name.is_empty() => out.push_str(&v.text()),
            _ => {
                out.push('?');
                out.push_str(&name);
            }
        }
    }
    out
}

fn check_input(input: &SessionInput) -> Result<(), SessionError> {
    for f in &input.existing {
        if f.user_id != input.user_id {
            return Err(SessionError::ForeignFact {
                id: f.id,
                owner: f.user_id.clone(),
                user: input.user_id.clone(),
            });
        }
        if !f.is_active {
            return Err(SessionError::InactiveFact(f.id));
        }
        let report = f.validate();
        if !report.is_ok() {
            return Err(SessionError::InvalidFact { id: f.id, report });
        }
    }
    for (index, c) in input.candidates.iter().enumerate() {
        let report = c.validate();
        if !report.is_ok() {
            return Err(SessionError::InvalidCandidate { index, report });
        }
    }
    Ok(())
}

/// Every candidate stored short-term, used when the pack fails at runtime.
pub fn fallback_decisions(input: &SessionInput, pack: &RulePack) -> Vec<EngineDecision> {
    input
        .candidates
        .iter()
        .enumerate()
        .map(|(position, c)| EngineDecision {
            action: DecisionAction::StoreShortTerm,
            target_fact_id: Some(provisional_id(&input.request_key, position)),
            candidate: Some(c.clone()),
            category: Some(pack.policy.category_of(&c.relation)),
            reason: FALLBACK_REASON.to_string(),
        })
        .collect()
}

/// Runs one isolated session and returns the ordered decisions.
pub fn run_session(input: &SessionInput, pack: &RulePack) -> Result<SessionOutcome, SessionError> {
    check_input(input)?;
    let mut session = Session::new(input, pack);
    match session.run() {
        Ok(()) => Ok(SessionOutcome {
            decisions: session.decisions,
            trace: session.trace,
            degraded: None,
        }),
        Err(failure) => {
            tracing::warn!(user = %input.user_id, error = %failure, "rule engine failed, storing candidates short-term");
            Ok(SessionOutcome {
                decisions: fallback_decisions(input, pack),
                trace: session.trace,
                degraded: Some(failure.to_string()),
            })
        }
    }
}

/// Runs independent sessions, in parallel when the `parallel` feature is on.
pub fn run_sessions(inputs: &[SessionInput], pack: &RulePack) -> Vec<Result<SessionOutcome, SessionError>> {
    crate::par::map(inputs, |input| run_session(input, pack))
}

/// Sequential counterpart of [`run_sessions`].
pub fn run_sessions_sequential(inputs: &[SessionInput], pack: &RulePack) -> Vec<Result<SessionOutcome, SessionError>> {
    inputs.iter().map(|input| run_session(input, pack)).collect()
}
