//! Fact memory for conversational agents: extraction, rule-based
//! reconciliation, a journaled per-user fact store, lifecycle management
//! and prompt context assembly.

pub mod engine;
pub mod context;
pub mod entity;
pub mod extraction;
pub mod lifecycle;
pub mod model;
pub mod par;
pub mod rules;
pub mod scenario;
pub mod service;
pub mod store;

pub use engine::{run_session, SessionInput, SessionOutcome};
pub use model::{CandidateFact, Category, DecisionAction, EngineDecision, MemoryFact, MemoryType, Scope};
pub use rules::{default_rule_pack, parse_rule_pack, RulePack};
