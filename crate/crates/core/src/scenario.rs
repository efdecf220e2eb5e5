//! Scripted scenarios replayed against a store with a simulated clock.
//!
//! A scenario file is JSON with a versioned header, the facts to seed and a
//! list of steps. Each step either acts (process a conversation, move the
//! clock, run the lifecycle job, build a context block) or asserts on the
//! state the earlier steps produced:
//!
//! ```json
//! {"format": "neusymms-scenario", "version": 1, "name": "demo",
//!  "user_id": "u1", "start": "2025-03-01T09:00:00Z", "seed": 7,
//!  "facts": [{"relation": "works_at", "value": "Meta",
//!             "category": "personal", "memory_type": "long_term"}],
//!  "steps": [{"op": "process", "text": "I work at Google"},
//!            {"op": "expect_state", "active": [
//!               {"relation": "works_at", "value": "Google", "memory_type": "long_term"}]}]}
//! ```

use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::context::{ContextBlock, ContextOptions, DEFAULT_CAP};
use crate::entity::normalize_entity;
use crate::extraction::{ConversationTurn, ExtractorConfig};
use crate::lifecycle::LifecyclePolicy;
use crate::model::{CandidateFact, Category, MemoryFact, MemoryType, Scope};
use crate::rules::RulePack;
use crate::service::{MemoryService, ProcessReport, ProcessRequest};
use crate::store::{Actor, ActiveFilter, Clock, FactQuery, FactStore, IdSource, ManualClock, NewFact, StoreError};

pub const SCENARIO_FORMAT: &str = "neusymms-scenario";
pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario header: {0}")]
    Header(String),
    #[error("step {index}: {message}")]
    Step { index: usize, message: String },
    #[error("seed fact {index}: {message}")]
    Seed { index: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn default_subject() -> String {
    "user".to_string()
}

fn default_confidence() -> f64 {
    0.9
}

fn default_scope() -> Scope {
    Scope::User
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedFact {
    #[serde(default = "default_subject")]
    pub subject: String,
    pub relation: String,
    pub value: String,
    pub category: Category,
    pub memory_type: MemoryType,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default = "default_scope")]
    pub scope: Scope,
    #[serde(default)]
    pub agent_id: Option<String>,
    #[serde(default)]
    pub flow_id: Option<String>,
    #[serde(default)]
    pub source_text: String,
}

impl SeedFact {
    pub fn to_new_fact(&self, user_id: &str) -> NewFact {
        NewFact {
            id: None,
            user_id: user_id.to_string(),
            scope: self.scope,
            agent_id: self.agent_id.clone(),
            flow_id: self.flow_id.clone(),
            subject: self.subject.clone(),
            relation: self.relation.clone(),
            value: self.value.clone(),
            category: self.category,
            memory_type: self.memory_type,
            confidence: self.confidence,
            source_text: self.source_text.clone(),
        }
    }
}

/// A fact as asserted by `expect_state`; omitted fields are not checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactSpec {
    #[serde(default = "default_subject")]
    pub subject: String,
    pub relation: String,
    pub value: String,
    #[serde(default)]
    pub memory_type: Option<MemoryType>,
    #[serde(default)]
    pub category: Option<Category>,
}

impl FactSpec {
    fn matches(&self, f: &MemoryFact) -> bool {
        self.subject.to_lowercase() == f.subject
            && self.relation.to_lowercase() == f.relation
            && normalize_entity(&self.value) == normalize_entity(&f.value)
            && self.memory_type.is_none_or(|m| m == f.memory_type)
            && self.category.is_none_or(|c| c == f.category)
    }
}

fn describe(f: &MemoryFact) -> String {
    format!(
        "{} {} {} ({}, {})",
        f.subject,
        f.relation,
        f.value,
        f.memory_type.label(),
        f.category.as_str()
    )
}

fn describe_spec(s: &FactSpec) -> String {
    let mut out = format!("{} {} {}", s.subject, s.relation, s.value);
    if let Some(m) = s.memory_type {
        out.push_str(&format!(" ({})", m.label()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    /// Runs the write path on one user utterance or a list of turns.
    Process {
        #[serde(default)]
        text: Option<String>,
        #[serde(default)]
        turns: Vec<ConversationTurn>,
        #[serde(default)]
        agent_id: Option<String>,
        #[serde(default)]
        flow_id: Option<String>,
    },
    /// Runs the write path on given candidates, skipping extraction.
    ProcessCandidates { candidates: Vec<CandidateFact> },
    AdvanceClock {
        #[serde(default)]
        hours: i64,
        #[serde(default)]
        minutes: i64,
    },
    RunLifecycle,
    BuildContext {
        #[serde(default)]
        cap: Option<usize>,
        #[serde(default)]
        touch: Option<bool>,
    },
    /// Counts reads of one active fact without going through the read path.
    Touch {
        #[serde(default = "default_subject")]
        subject: String,
        relation: String,
        value: String,
        #[serde(default)]
        times: Option<u32>,
    },
    /// The active facts must be exactly `active`; each of `inactive` must
    /// exist and be inactive.
    ExpectState {
        active: Vec<FactSpec>,
        #[serde(default)]
        inactive: Vec<FactSpec>,
    },
    /// The last built block must have exactly this text.
    ExpectBlock { text: String },
    /// Counts of the last write-path report.
    ExpectReport {
        #[serde(default)]
        candidates: Option<usize>,
        #[serde(default)]
        stored: Option<usize>,
        #[serde(default)]
        retracted: Option<usize>,
        #[serde(default)]
        discarded: Option<usize>,
    },
    /// The configured extractor must turn `text` into exactly `candidates`.
    ExpectExtraction { text: String, candidates: Vec<CandidateFact> },
}

impl Step {
    pub fn op(&self) -> &'static str {
        match self {
            Step::Process { .. } => "process",
            Step::ProcessCandidates { .. } => "process_candidates",
            Step::AdvanceClock { .. } => "advance_clock",
            Step::RunLifecycle => "run_lifecycle",
            Step::BuildContext { .. } => "build_context",
            Step::Touch { .. } => "touch",
            Step::ExpectState { .. } => "expect_state",
            Step::ExpectBlock { .. } => "expect_block",
            Step::ExpectReport { .. } => "expect_report",
            Step::ExpectExtraction { .. } => "expect_extraction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub user_id: String,
    pub start: DateTime<Utc>,
    pub seed: u64,
    pub facts: Vec<SeedFact>,
    pub steps: Vec<Step>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    format: String,
    version: u32,
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default = "default_user")]
    user_id: String,
    #[serde(default = "default_start")]
    start: DateTime<Utc>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    facts: Vec<serde_json::Value>,
    steps: Vec<serde_json::Value>,
}

fn default_user() -> String {
    "user-1".to_string()
}

fn default_start() -> DateTime<Utc> {
    DateTime::UNIX_EPOCH
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let raw: RawScenario = serde_json::from_str(text).map_err(|e| ScenarioError::Header(e.to_string()))?;
        if raw.format != SCENARIO_FORMAT || raw.version != SCENARIO_VERSION {
            return Err(ScenarioError::Header(format!(
                "expected {SCENARIO_FORMAT} version {SCENARIO_VERSION}, found {} version {}",
                raw.format, raw.version
            )));
        }
        let facts = raw
            .facts
            .into_iter()
            .enumerate()
            .map(|(index, v)| {
                serde_json::from_value(v).map_err(|e| ScenarioError::Seed {
                    index,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        let steps = raw
            .steps
            .into_iter()
            .enumerate()
            .map(|(index, v)| {
                let step: Step = serde_json::from_value(v).map_err(|e| ScenarioError::Step {
                    index,
                    message: e.to_string(),
                })?;
                if let Step::Process { text, turns, .. } = &step {
                    if text.is_some() == !turns.is_empty() {
                        return Err(ScenarioError::Step {
                            index,
                            message: "process needs exactly one of `text` or `turns`".into(),
                        });
                    }
                }
                Ok(step)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            name: raw.name,
            description: raw.description,
            user_id: raw.user_id,
            start: raw.start,
            seed: raw.seed,
            facts,
            steps,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepResult {
    pub index: usize,
    pub op: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub passed: bool,
    pub steps: Vec<StepResult>,
}

impl ScenarioReport {
    pub fn first_failure(&self) -> Option<&StepResult> {
        self.steps.iter().find(|s| !s.passed)
    }
}

impl std::fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for s in &self.steps {
            let mark = if s.passed { "ok  " } else { "FAIL" };
            writeln!(f, "{mark} step {} {}: {}", s.index, s.op, s.detail)?;
        }
        let verdict = if self.passed { "passed" } else { "failed" };
        write!(f, "scenario {} {verdict}", self.name)
    }
}

/// Replay settings besides the scenario itself.
#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub pack: RulePack,
    pub extraction: ExtractorConfig,
    pub lifecycle: LifecyclePolicy,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            pack: crate::rules::default_rule_pack(),
            extraction: ExtractorConfig::default(),
            lifecycle: LifecyclePolicy::default(),
        }
    }
}

struct Run<'a> {
    scenario: &'a Scenario,
    service: MemoryService,
    clock: Arc<ManualClock>,
    last_block: Option<ContextBlock>,
    last_report: Option<ProcessReport>,
}

/// Replays a scenario on a fresh in-memory store, or on the store kept in
/// `store_dir` when one is given.
pub fn replay(
    scenario: &Scenario,
    store_dir: Option<&Path>,
    opts: ReplayOptions,
) -> Result<ScenarioReport, ScenarioError> {
    let clock = Arc::new(ManualClock::new(scenario.start));
    let ids = IdSource::seeded(scenario.seed);
    let store = match store_dir {
        Some(dir) => FactStore::open(dir, clock.clone(), ids)?,
        None => FactStore::in_memory(clock.clone(), ids),
    };
    let service = MemoryService::new(Arc::new(store), opts.pack, opts.extraction, opts.lifecycle)
        .map_err(ScenarioError::Setup)?;
    for (index, seed) in scenario.facts.iter().enumerate() {
        let new = seed.to_new_fact(&scenario.user_id);
        service
            .store()
            .insert(new, Actor::Cli)
            .map_err(|e| ScenarioError::Seed {
                index,
                message: e.to_string(),
            })?;
    }
    let mut run = Run {
        scenario,
        service,
        clock,
        last_block: None,
        last_report: None,
    };
    let steps: Vec<StepResult> = scenario
        .steps
        .iter()
        .enumerate()
        .map(|(index, step)| {
            let (passed, detail) = match run.step(step) {
                Ok(detail) => (true, detail),
                Err(detail) => (false, detail),
            };
            StepResult {
                index,
                op: step.op(),
                passed,
                detail,
            }
        })
        .collect();
    Ok(ScenarioReport {
        name: scenario.name.clone(),
        passed: steps.iter().all(|s| s.passed),
        steps,
    })
}

fn check(ok: bool, pass: String, fail: String) -> Result<String, String> {
    if ok {
        Ok(pass)
    } else {
        Err(fail)
    }
}

impl Run<'_> {
    fn user(&self) -> &str {
        &self.scenario.user_id
    }

    fn facts(&self, active: ActiveFilter) -> Result<Vec<MemoryFact>, String> {
        let q = FactQuery {
            active,
            ..FactQuery::user(self.user())
        };
        self.service.store().query(&q).map(|p| p.facts).map_err(|e| e.to_string())
    }

    fn step(&mut self, step: &Step) -> Result<String, String> {
        match step {
            Step::Process {
                text,
                turns,
                agent_id,
                flow_id,
            } => {
                let turns = match text {
                    Some(t) => vec![ConversationTurn::user(t.clone())],
                    None => turns.clone(),
                };
                let req = ProcessRequest {
                    turns,
                    agent_id: agent_id.clone(),
                    flow_id: flow_id.clone(),
                };
                let report = self
                    .service
                    .process(self.user(), &req, Actor::Cli)
                    .map_err(|e| e.to_string())?;
                let detail = summarize(&report);
                self.last_report = Some(report);
                Ok(detail)
            }
            Step::ProcessCandidates { candidates } => {
                let report = self
                    .service
                    .process_candidates(self.user(), candidates.clone(), None, Actor::Cli)
                    .map_err(|e| e.to_string())?;
                let detail = summarize(&report);
                self.last_report = Some(report);
                Ok(detail)
            }
            Step::AdvanceClock { hours, minutes } => {
                let now = self.clock.advance(Duration::hours(*hours) + Duration::minutes(*minutes));
                Ok(format!("now {}", now.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)))
            }
            Step::RunLifecycle => {
                let report = self.service.run_lifecycle(self.clock.now());
                check(
                    report.failures.is_empty(),
                    format!("{} promoted, {} pruned", report.promoted.len(), report.pruned.len()),
                    format!("lifecycle failures: {:?}", report.failures),
                )
            }
            Step::BuildContext { cap, touch } => {
                let opts = ContextOptions {
                    cap: cap.unwrap_or(DEFAULT_CAP),
                    touch: touch.unwrap_or(true),
                };
                let block = self.service.context(self.user(), opts);
                let result = match &block.error {
                    Some(e) => Err(format!("context degraded: {e}")),
                    None => Ok(format!("{} facts, truncated={}", block.fact_ids.len(), block.truncated)),
                };
                self.last_block = Some(block);
                result
            }
            Step::Touch {
                subject,
                relation,
                value,
                times,
            } => {
                let spec = FactSpec {
                    subject: subject.clone(),
                    relation: relation.clone(),
                    value: value.clone(),
                    memory_type: None,
                    category: None,
                };
                let facts = self.facts(ActiveFilter::Active)?;
                let fact = facts
                    .iter()
                    .find(|f| spec.matches(f))
                    .ok_or_else(|| format!("no active fact {}", describe_spec(&spec)))?;
                let times = times.unwrap_or(1);
                for _ in 0..times {
                    self.service
                        .store()
                        .touch(self.user(), &[fact.id], Actor::Cli)
                        .map_err(|e| e.to_string())?;
                }
                Ok(format!("{} read {times} times", describe(fact)))
            }
            Step::ExpectState { active, inactive } => {
                let live = self.facts(ActiveFilter::Active)?;
                let mut problems = Vec::new();
                let mut unmatched: Vec<&MemoryFact> = live.iter().collect();
                for spec in active {
                    match unmatched.iter().position(|f| spec.matches(f)) {
                        Some(i) => {
                            unmatched.remove(i);
                        }
                        None => problems.push(format!("missing active {}", describe_spec(spec))),
                    }
                }
                problems.extend(unmatched.iter().map(|f| format!("unexpected active {}", describe(f))));
                if !inactive.is_empty() {
                    let dead = self.facts(ActiveFilter::Inactive)?;
                    for spec in inactive {
                        if !dead.iter().any(|f| spec.matches(f)) {
                            problems.push(format!("missing inactive {}", describe_spec(spec)));
                        }
                    }
                }
                check(
                    problems.is_empty(),
                    format!("{} active, {} inactive as expected", active.len(), inactive.len()),
                    problems.join("; "),
                )
            }
            Step::ExpectBlock { text } => {
                let block = self.last_block.as_ref().ok_or("no context block built yet")?;
                check(
                    &block.text == text,
                    format!("{} lines match", block.text.lines().count()),
                    format!("block differs:\n--- expected\n{text}\n--- actual\n{}", block.text),
                )
            }
            Step::ExpectReport {
                candidates,
                stored,
                retracted,
                discarded,
            } => {
                let report = self.last_report.as_ref().ok_or("no write-path report yet")?;
                let actual = [
                    ("candidates", report.candidates),
                    ("stored", report.applied.stored.len()),
                    ("retracted", report.applied.retracted.len()),
                    ("discarded", report.applied.discarded),
                ];
                let wanted = [candidates, stored, retracted, discarded];
                let problems: Vec<String> = actual
                    .iter()
                    .zip(wanted)
                    .filter_map(|((name, got), want)| {
                        want.filter(|w| w != got).map(|w| format!("{name}: expected {w}, got {got}"))
                    })
                    .collect();
                check(problems.is_empty(), summarize(report), problems.join("; "))
            }
            Step::ExpectExtraction { text, candidates } => {
                let got = self.service.extract(&[ConversationTurn::user(text.clone())], None, None);
                let strip = |cs: &[CandidateFact]| -> Vec<CandidateFact> {
                    cs.iter()
                        .map(|c| CandidateFact {
                            source_text: String::new(),
                            ..c.clone()
                        })
                        .collect()
                };
                check(
                    strip(&got) == strip(candidates),
                    format!("{} candidates match", got.len()),
                    format!(
                        "expected {}, got {}",
                        serde_json::to_string(&strip(candidates)).unwrap_or_default(),
                        serde_json::to_string(&strip(&got)).unwrap_or_default()
                    ),
                )
            }
        }
    }
}

fn summarize(r: &ProcessReport) -> String {
    format!(
        "{} candidates, {} stored, {} retracted, {} discarded",
        r.candidates,
        r.applied.stored.len(),
        r.applied.retracted.len(),
        r.applied.discarded
    )
}
