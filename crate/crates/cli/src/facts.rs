use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Subcommand, ValueEnum};
use uuid::Uuid;

use neusymms_core::model::{Category, MemoryFact, MemoryType, Scope};
use neusymms_core::store::{ActiveFilter, Actor, ClearFilter, FactPatch, FactQuery, QueryOrder, SystemClock};

use crate::{open_store, usage, Failure};

#[derive(Debug, Args)]
pub struct StoreArg {
    #[arg(long)]
    store: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Activity {
    Active,
    Inactive,
    Any,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Order {
    Injection,
    Recency,
    Access,
}

#[derive(Debug, Subcommand)]
pub enum FactsCommand {
    /// List a user's facts, one per line.
    Ls {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        user: String,
        #[arg(long)]
        category: Option<Category>,
        #[arg(long)]
        scope: Option<Scope>,
        #[arg(long)]
        agent_id: Option<String>,
        #[arg(long)]
        flow_id: Option<String>,
        #[arg(long = "type")]
        memory_type: Option<MemoryType>,
        #[arg(long, value_enum, default_value = "active")]
        active: Activity,
        /// Case-insensitive text to look for in subject, relation or value.
        #[arg(long)]
        search: Option<String>,
        #[arg(long, value_enum, default_value = "injection")]
        order: Order,
        #[arg(long)]
        limit: Option<usize>,
        /// Print canonical JSON, one fact per line.
        #[arg(long)]
        json: bool,
    },
    /// Counts of a user's facts.
    Summary {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        user: String,
    },
    /// Change fields of one fact.
    Edit {
        #[command(flatten)]
        store: StoreArg,
        id: String,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        relation: Option<String>,
        #[arg(long)]
        value: Option<String>,
        #[arg(long)]
        category: Option<Category>,
        #[arg(long = "type")]
        memory_type: Option<MemoryType>,
        #[arg(long)]
        confidence: Option<f64>,
        #[arg(long)]
        active: Option<bool>,
    },
    /// Soft-delete a user's active facts, optionally only one scope.
    Clear {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        user: String,
        #[arg(long)]
        scope: Option<Scope>,
        #[arg(long)]
        agent_id: Option<String>,
        #[arg(long)]
        flow_id: Option<String>,
    },
}

fn row(f: &MemoryFact) -> String {
    format!(
        "{}  [{}/{}]  {}  {} {} {}  conf={:.2} access={}{}",
        f.id,
        f.memory_type.label(),
        f.category,
        f.scope_key(),
        f.subject,
        f.relation,
        f.value,
        f.confidence,
        f.access_count,
        if f.is_active { "" } else { "  inactive" }
    )
}

pub fn run(command: FactsCommand) -> Result<(), Failure> {
    let clock = Arc::new(SystemClock);
    match command {
        FactsCommand::Ls {
            store,
            user,
            category,
            scope,
            agent_id,
            flow_id,
            memory_type,
            active,
            search,
            order,
            limit,
            json,
        } => {
            let store = open_store(&store.store, clock)?;
            let q = FactQuery {
                scope,
                agent_id,
                flow_id,
                category,
                memory_type,
                active: match active {
                    Activity::Active => ActiveFilter::Active,
                    Activity::Inactive => ActiveFilter::Inactive,
                    Activity::Any => ActiveFilter::Any,
                },
                search,
                order: match order {
                    Order::Injection => QueryOrder::InjectionOrder,
                    Order::Recency => QueryOrder::Recency,
                    Order::Access => QueryOrder::Access,
                },
                limit,
                ..FactQuery::user(user)
            };
            let page = store.query(&q).map_err(usage)?;
            for f in &page.facts {
                if json {
                    println!("{}", serde_json::to_string(f).expect("fact serializes"));
                } else {
                    println!("{}", row(f));
                }
            }
            eprintln!("{} of {} facts", page.facts.len(), page.total);
            Ok(())
        }
        FactsCommand::Summary { store, user } => {
            let store = open_store(&store.store, clock)?;
            let facts = store
                .query(&FactQuery {
                    active: ActiveFilter::Any,
                    ..FactQuery::user(&user)
                })
                .map_err(usage)?
                .facts;
            let active: Vec<&MemoryFact> = facts.iter().filter(|f| f.is_active).collect();
            let long = active.iter().filter(|f| f.memory_type == MemoryType::LongTerm).count();
            println!(
                "active {}  long-term {}  short-term {}  inactive {}",
                active.len(),
                long,
                active.len() - long,
                facts.len() - active.len()
            );
            Ok(())
        }
        FactsCommand::Edit {
            store,
            id,
            subject,
            relation,
            value,
            category,
            memory_type,
            confidence,
            active,
        } => {
            let id: Uuid = id.parse().map_err(|_| usage(format!("`{id}` is not a fact id")))?;
            let patch = FactPatch {
                subject,
                relation,
                value,
                category,
                memory_type,
                confidence,
                is_active: active,
            };
            if patch.is_empty() {
                return Err(usage("nothing to change; pass at least one field flag"));
            }
            let store = open_store(&store.store, clock)?;
            let fact = store.patch(id, &patch, Actor::Cli).map_err(usage)?;
            println!("{}", serde_json::to_string_pretty(&fact).expect("fact serializes"));
            Ok(())
        }
        FactsCommand::Clear {
            store,
            user,
            scope,
            agent_id,
            flow_id,
        } => {
            let store = open_store(&store.store, clock)?;
            let filter = ClearFilter {
                scope,
                agent_id,
                flow_id,
            };
            let n = store.clear(&user, &filter, Actor::Cli).map_err(usage)?;
            println!("cleared {n} facts");
            Ok(())
        }
    }
}
