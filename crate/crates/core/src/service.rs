//! The write and read paths assembled over one store, as used by the HTTP
//! service and the command line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::context::{build_context, ContextBlock, ContextOptions};
use crate::engine::{run_session, SessionError, SessionInput, SessionOutcome};
use crate::extraction::{build_extractor, extract, ConversationTurn, Extractor, ExtractorConfig};
use crate::lifecycle::{run_job, JobReport, LifecyclePolicy};
use crate::model::{CandidateFact, EngineDecision, MemoryType, PromptContext, Validate, ValidationReport};
use crate::rules::RulePack;
use crate::store::{Actor, ApplyReport, FactQuery, FactStore, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessRequest {
    pub turns: Vec<ConversationTurn>,
    #[serde(default)]
    pub agent_id: Option<String>,
    #[serde(default)]
    pub flow_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcessReport {
    pub request_key: String,
    pub candidates: usize,
    pub decisions: Vec<EngineDecision>,
    #[serde(flatten)]
    pub applied: ApplyReport,
    /// Set when the rule pack failed and the fallback decisions were used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degraded: Option<String>,
    /// Key of this request's record in the trace log, when one is kept.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ProcessError {
    #[error("turns must not be empty")]
    NoTurns,
    #[error("candidate {index} is invalid: {report}")]
    InvalidCandidate { index: usize, report: ValidationReport },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub active_count: usize,
    pub long_term_count: usize,
    pub short_term_count: usize,
    pub inactive_count: usize,
    /// Active facts per category.
    pub by_category: BTreeMap<String, usize>,
    /// Active facts per scope.
    pub by_scope: BTreeMap<String, usize>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    request_key: &'a str,
    user_id: &'a str,
    timestamp: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    degraded: Option<&'a str>,
    decisions: &'a [EngineDecision],
    trace: &'a [crate::engine::TraceRecord],
}

pub struct MemoryService {
    store: Arc<FactStore>,
    pack: Arc<RulePack>,
    extractor: Box<dyn Extractor>,
    extraction: ExtractorConfig,
    lifecycle: LifecyclePolicy,
    trace_log: Option<Mutex<File>>,
}

impl std::fmt::Debug for MemoryService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryService")
            .field("extraction", &self.extraction)
            .field("lifecycle", &self.lifecycle)
            .finish_non_exhaustive()
    }
}

impl MemoryService {
    pub fn new(
        store: Arc<FactStore>,
        pack: RulePack,
        extraction: ExtractorConfig,
        lifecycle: LifecyclePolicy,
    ) -> Result<Self, String> {
        lifecycle.check()?;
        let extractor = build_extractor(&extraction)?;
        Ok(Self::with_extractor(store, pack, extractor, extraction, lifecycle))
    }

    pub fn with_extractor(
        store: Arc<FactStore>,
        pack: RulePack,
        extractor: Box<dyn Extractor>,
        extraction: ExtractorConfig,
        lifecycle: LifecyclePolicy,
    ) -> Self {
        Self {
            store,
            pack: Arc::new(pack),
            extractor,
            extraction,
            lifecycle,
            trace_log: None,
        }
    }

    /// Appends one JSON line per processed request to `path`.
    pub fn log_traces_to(mut self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.trace_log = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn store(&self) -> &Arc<FactStore> {
        &self.store
    }

    pub fn pack(&self) -> &RulePack {
        &self.pack
    }

    pub fn lifecycle(&self) -> &LifecyclePolicy {
        &self.lifecycle
    }

    pub fn extraction(&self) -> &ExtractorConfig {
        &self.extraction
    }

    /// Candidates the configured extractor finds in `turns`.
    pub fn extract(&self, turns: &[ConversationTurn], agent_id: Option<&str>, flow_id: Option<&str>) -> Vec<CandidateFact> {
        extract(self.extractor.as_ref(), turns, &self.extraction, agent_id, flow_id)
    }

    /// Extracts, decides and applies. Extraction failures yield an empty
    /// report rather than an error.
    pub fn process(&self, user: &str, req: &ProcessRequest, actor: Actor) -> Result<ProcessReport, ProcessError> {
        if req.turns.is_empty() {
            return Err(ProcessError::NoTurns);
        }
        let candidates = self.extract(&req.turns, req.agent_id.as_deref(), req.flow_id.as_deref());
        let context = req.turns.last().map(|t| PromptContext {
            turn_number: t.turn_number,
            ..PromptContext::default()
        });
        self.process_candidates(user, candidates, context, actor)
    }

    pub fn process_candidates(
        &self,
        user: &str,
        candidates: Vec<CandidateFact>,
        context: Option<PromptContext>,
        actor: Actor,
    ) -> Result<ProcessReport, ProcessError> {
        if let Some((index, report)) = candidates
            .iter()
            .map(|c| c.validate())
            .enumerate()
            .find(|(_, r)| !r.is_ok())
        {
            return Err(ProcessError::InvalidCandidate { index, report });
        }
        let request_key = self.store.next_id().to_string();
        let count = candidates.len();
        if candidates.is_empty() {
            return Ok(ProcessReport {
                request_key,
                candidates: 0,
                decisions: Vec::new(),
                applied: ApplyReport::default(),
                degraded: None,
                trace_ref: None,
            });
        }
        let mut session_error = None;
        let result = self.store.decide_and_apply(user, actor, |existing| {
            let input = SessionInput {
                user_id: user.to_string(),
                request_key: request_key.clone(),
                existing,
                candidates,
                context,
            };
            match run_session(&input, &self.pack) {
                Ok(outcome) => Ok((outcome.decisions.clone(), outcome)),
                Err(e) => {
                    let message = e.to_string();
                    session_error = Some(e);
                    Err(StoreError::Rejected { index: 0, message })
                }
            }
        });
        if let Some(e) = session_error {
            return Err(e.into());
        }
        let (applied, decisions, outcome) = result?;
        let trace_ref = self.write_trace(user, &request_key, &outcome);
        Ok(ProcessReport {
            request_key,
            candidates: count,
            decisions,
            applied,
            degraded: outcome.degraded,
            trace_ref,
        })
    }

    fn write_trace(&self, user: &str, request_key: &str, outcome: &SessionOutcome) -> Option<String> {
        let log = self.trace_log.as_ref()?;
        let line = TraceLine {
            request_key,
            user_id: user,
            timestamp: self.store.now(),
            degraded: outcome.degraded.as_deref(),
            decisions: &outcome.decisions,
            trace: &outcome.trace,
        };
        let mut text = serde_json::to_string(&line).expect("trace serializes");
        text.push('\n');
        match log.lock().write_all(text.as_bytes()) {
            Ok(()) => Some(request_key.to_string()),
            Err(e) => {
                tracing::warn!(error = %e, "could not write trace record");
                None
            }
        }
    }

    pub fn context(&self, user: &str, opts: ContextOptions) -> ContextBlock {
        build_context(&self.store, user, opts, &self.lifecycle)
    }

    pub fn summary(&self, user: &str) -> Result<SummaryReport, StoreError> {
        let facts = self.store.query(&FactQuery {
            active: crate::store::ActiveFilter::Any,
            ..FactQuery::user(user)
        })?;
        let mut report = SummaryReport::default();
        for f in &facts.facts {
            if !f.is_active {
                report.inactive_count += 1;
                continue;
            }
            report.active_count += 1;
            match f.memory_type {
                MemoryType::LongTerm => report.long_term_count += 1,
                MemoryType::ShortTerm => report.short_term_count += 1,
            }
            *report.by_category.entry(f.category.as_str().to_string()).or_default() += 1;
            *report.by_scope.entry(f.scope.as_str().to_string()).or_default() += 1;
        }
        Ok(report)
    }

    pub fn run_lifecycle(&self, now: DateTime<Utc>) -> JobReport {
        run_job(&self.store, &self.lifecycle, now)
    }
}
