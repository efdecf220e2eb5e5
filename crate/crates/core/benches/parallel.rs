//! Rayon against the plain loop for batches of independent rule sessions,
//! plus the lifecycle job (parallel or not depending on the build's
//! features; run with `--no-default-features` for the sequential numbers).

use std::hint::black_box;
use std::sync::Arc;

use chrono::{Duration, TimeZone, Utc};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use uuid::Uuid;

use neusymms_core::engine::{run_sessions, run_sessions_sequential, SessionInput};
use neusymms_core::lifecycle::{run_job, LifecyclePolicy};
use neusymms_core::model::{CandidateFact, MemoryFact, MemoryType, Scope};
use neusymms_core::rules::default_rule_pack;
use neusymms_core::store::{Actor, FactStore, IdSource, ManualClock, NewFact};

const RELATIONS: &[&str] = &[
    "works_at", "lives_in", "likes", "has_pet", "speaks_language", "died", "working_on", "prefers",
];
const VALUES: &[&str] = &[
    "Google", "Meta", "Mountain View", "Toronto", "Python", "Go", "tea", "coffee", "dark mode", "Q3 report",
];

fn pick<'a>(rng: &mut ChaCha8Rng, from: &[&'a str]) -> &'a str {
    from[rng.random_range(0..from.len())]
}

fn session_inputs(n: usize, existing: usize, candidates: usize) -> Vec<SessionInput> {
    let pack = default_rule_pack();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let t0 = Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap();
    (0..n)
        .map(|u| {
            let user = format!("user-{u}");
            let existing = (0..existing)
                .map(|i| {
                    let relation = pick(&mut rng, RELATIONS);
                    MemoryFact {
                        id: Uuid::from_u128((u * 10_000 + i + 1) as u128),
                        user_id: user.clone(),
                        scope: Scope::User,
                        agent_id: None,
                        flow_id: None,
                        subject: "user".into(),
                        relation: relation.into(),
                        value: pick(&mut rng, VALUES).into(),
                        category: pack.policy.category_of(relation),
                        memory_type: if rng.random_bool(0.5) { MemoryType::LongTerm } else { MemoryType::ShortTerm },
                        confidence: 0.9,
                        access_count: rng.random_range(0..5),
                        source_text: String::new(),
                        created_at: t0,
                        last_accessed_at: t0,
                        is_active: true,
                    }
                })
                .collect();
            let candidates = (0..candidates)
                .map(|_| CandidateFact {
                    subject: "user".into(),
                    relation: pick(&mut rng, RELATIONS).into(),
                    value: pick(&mut rng, VALUES).into(),
                    confidence: rng.random_range(0.2..1.0),
                    scope: Scope::User,
                    agent_id: None,
                    flow_id: None,
                    source_text: String::new(),
                })
                .collect();
            SessionInput {
                user_id: user,
                request_key: format!("req-{u}"),
                existing,
                candidates,
                context: None,
            }
        })
        .collect()
}

fn sessions(c: &mut Criterion) {
    let pack = default_rule_pack();
    let mut group = c.benchmark_group("sessions");
    for n in [16, 128, 512] {
        let inputs = session_inputs(n, 40, 6);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("rayon", n), &inputs, |b, inputs| {
            b.iter(|| black_box(run_sessions(inputs, &pack)))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &inputs, |b, inputs| {
            b.iter(|| black_box(run_sessions_sequential(inputs, &pack)))
        });
    }
    group.finish();
}

fn lifecycle_job(c: &mut Criterion) {
    let start = Utc.with_ymd_and_hms(2025, 3, 1, 9, 0, 0).unwrap();
    let store = FactStore::in_memory(Arc::new(ManualClock::new(start)), IdSource::seeded(5));
    for u in 0..200 {
        let user = format!("user-{u}");
        store
            .transact(&user, Actor::Cli, |tx| {
                for i in 0..200 {
                    tx.insert(
                        NewFact {
                            id: None,
                            user_id: user.clone(),
                            scope: Scope::User,
                            agent_id: None,
                            flow_id: None,
                            subject: "user".into(),
                            relation: "working_on".into(),
                            value: format!("task {i}"),
                            category: neusymms_core::model::Category::Task,
                            memory_type: MemoryType::ShortTerm,
                            confidence: 0.9,
                            source_text: String::new(),
                        },
                        None,
                    )?;
                }
                Ok(())
            })
            .unwrap();
    }
    // Nothing is due, so every iteration scans all users without writing.
    let policy = LifecyclePolicy::default();
    let now = start + Duration::hours(1);
    let label = if neusymms_core::par::is_parallel() { "rayon" } else { "sequential" };
    c.bench_function(&format!("lifecycle_job/{label}/40k"), |b| {
        b.iter(|| black_box(run_job(&store, &policy, now)))
    });
}

criterion_group!(benches, sessions, lifecycle_job);
criterion_main!(benches);
