//! The recorded contract suite, plus the contract checks that do not fit
//! a request/response table. Every test ends with a journal replay audit.

mod common;

use serde_json::{json, Value};

use neusymms_core::extraction::{ExtractorConfig, ExtractorMode};
use neusymms_core::store::{Actor, EventKind};
use neusymms_server::contract::{audit, run_case, send, RecordedSuite};

use common::*;

#[tokio::test]
async fn recorded_suite() {
    let suite = RecordedSuite::from_path(&fixture("contract.json")).unwrap();
    let srv = server();
    suite.seed_into(&srv.store).unwrap();
    let mut failures = Vec::new();
    for case in &suite.cases {
        let outcome = run_case(&srv.router, &srv.store, case).await;
        println!("{} {}: {}", if outcome.passed { "ok  " } else { "FAIL" }, outcome.name, outcome.detail);
        if !outcome.passed {
            failures.push(outcome.name);
        }
        audit(&srv.store).unwrap_or_else(|e| panic!("after `{}`: {e}", case.name));
    }
    assert!(failures.is_empty(), "failed cases: {failures:?}");
}

fn turns(text: &str) -> Value {
    json!({ "turns": [{ "role": "user", "text": text }] })
}

/// Each successful mutation appends one contiguous run of api-actor
/// events for the addressed user; rejected requests append nothing.
#[tokio::test]
async fn each_mutation_is_one_api_event_chain() {
    let srv = server();
    let alice = token_of("alice");
    let t = Some(alice.as_str());
    let mut chains = Vec::new();
    let mut step = |before: u64, store: &neusymms_core::store::FactStore| {
        let new: Vec<_> = store.events_since(before);
        chains.push(new);
    };

    let before = srv.store.last_sequence();
    let (status, report) = send(&srv.router, "POST", "/v1/users/alice/memory:process", t, Some(&turns("I live in Toronto. I speak Python."))).await;
    assert_eq!(status, 200, "{report}");
    step(before, &srv.store);
    let id = report["stored"][0].as_str().unwrap().to_string();

    let before = srv.store.last_sequence();
    let (status, _) = send(&srv.router, "PATCH", &format!("/v1/facts/{id}"), t, Some(&json!({"value": "Ottawa"}))).await;
    assert_eq!(status, 200);
    step(before, &srv.store);

    let before = srv.store.last_sequence();
    let (status, _) = send(&srv.router, "DELETE", &format!("/v1/facts/{id}"), t, None).await;
    assert_eq!(status, 200);
    step(before, &srv.store);

    let before = srv.store.last_sequence();
    let (status, _) = send(&srv.router, "POST", "/v1/users/alice/facts:clear", t, Some(&json!({}))).await;
    assert_eq!(status, 200);
    step(before, &srv.store);

    for chain in &chains {
        assert!(!chain.is_empty());
        assert!(chain.windows(2).all(|w| w[1].seq == w[0].seq + 1));
        assert!(chain.iter().all(|e| e.actor == Actor::Api && e.user_id == "alice"));
        assert!(chain.iter().all(|e| e.timestamp == chain[0].timestamp));
    }
    let patch = &chains[1];
    assert_eq!(patch.len(), 1);
    assert_eq!(patch[0].kind, EventKind::FactUpdated);
    assert_eq!(patch[0].fact.as_ref().unwrap().value, "Ottawa");
    assert_eq!(chains[2][0].kind, EventKind::FactDeactivated);
    assert_eq!(chains[3][0].kind, EventKind::Cleared);

    let before = srv.store.last_sequence();
    for (method, path, body) in [
        ("PATCH", format!("/v1/facts/{id}"), Some(json!({"confidence": 7}))),
        ("POST", "/v1/users/alice/memory:process".to_string(), Some(json!({"turns": []}))),
        ("POST", "/v1/users/bob/facts:clear".to_string(), None),
    ] {
        let (status, _) = send(&srv.router, method, &path, t, body.as_ref()).await;
        assert!((400..500).contains(&status));
    }
    assert_eq!(srv.store.last_sequence(), before);
    audit(&srv.store).unwrap();
}

#[tokio::test]
async fn unreachable_extractor_degrades_to_zero_candidates() {
    let srv = server_with(ExtractorConfig {
        mode: ExtractorMode::Remote,
        endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
        model: "m".into(),
        timeout_ms: 2_000,
        ..ExtractorConfig::default()
    });
    let alice = token_of("alice");
    let (status, report) = send(
        &srv.router,
        "POST",
        "/v1/users/alice/memory:process",
        Some(&alice),
        Some(&turns("I work at Google.")),
    )
    .await;
    assert_eq!(status, 200, "{report}");
    assert_eq!(report["candidates"], 0);
    assert_eq!(report["stored"], json!([]));
    assert_eq!(srv.store.last_sequence(), 0);
    audit(&srv.store).unwrap();
}

#[tokio::test]
async fn context_survives_read_failures() {
    let srv = server();
    let alice = token_of("alice");
    let t = Some(alice.as_str());
    send(&srv.router, "POST", "/v1/users/alice/memory:process", t, Some(&turns("I work at Google."))).await;
    srv.store.faults().fail_reads(true);
    let (status, block) = send(&srv.router, "POST", "/v1/users/alice/memory:context", t, None).await;
    assert_eq!(status, 200);
    assert_eq!(block["text"], "[Memory -- Known facts about this user]");
    assert_eq!(block["fact_ids"], json!([]));
    assert!(block["error"].is_string());
    srv.store.faults().fail_reads(false);
    audit(&srv.store).unwrap();
}

#[tokio::test]
async fn store_write_failure_is_a_500() {
    let srv = server();
    let alice = token_of("alice");
    srv.store.faults().fail_writes(true);
    let (status, body) = send(
        &srv.router,
        "POST",
        "/v1/users/alice/memory:process",
        Some(&alice),
        Some(&turns("I work at Google.")),
    )
    .await;
    assert_eq!(status, 500, "{body}");
    assert_eq!(body["error"]["code"], "internal");
    srv.store.faults().fail_writes(false);
    audit(&srv.store).unwrap();
}

/// Pages read at one snapshot token never repeat or skip a fact, however
/// many writes land between them.
#[tokio::test]
async fn pages_at_a_snapshot_are_stable_under_writes() {
    let srv = server();
    let admin = Some(ADMIN_TOKEN);
    for i in 0..23 {
        let text = format!("I like item{i}.");
        let (status, _) = send(&srv.router, "POST", "/v1/users/alice/memory:process", admin, Some(&turns(&text))).await;
        assert_eq!(status, 200);
        srv.clock.advance(chrono::Duration::minutes(1));
    }
    let (_, first) = send(&srv.router, "GET", "/v1/users/alice/facts?limit=5&order=recency", admin, None).await;
    let snapshot = first["snapshot"].as_u64().unwrap();
    let total = first["total"].as_u64().unwrap();
    assert_eq!(total, 23);
    let mut seen: Vec<String> = first["facts"].as_array().unwrap().iter().map(|f| f["id"].as_str().unwrap().into()).collect();
    let mut offset = first["next_offset"].as_u64();
    let mut round = 0;
    while let Some(o) = offset {
        // Interleave writes that reorder, add and remove facts.
        let victim = seen[round % seen.len()].clone();
        send(&srv.router, "DELETE", &format!("/v1/facts/{victim}"), admin, None).await;
        let text = format!("I like extra{round}.");
        send(&srv.router, "POST", "/v1/users/alice/memory:process", admin, Some(&turns(&text))).await;
        srv.clock.advance(chrono::Duration::minutes(1));
        send(&srv.router, "POST", "/v1/users/alice/memory:context", admin, None).await;
        round += 1;

        let path = format!("/v1/users/alice/facts?limit=5&order=recency&offset={o}&snapshot={snapshot}");
        let (status, page) = send(&srv.router, "GET", &path, admin, None).await;
        assert_eq!(status, 200, "{page}");
        assert_eq!(page["snapshot"].as_u64(), Some(snapshot));
        assert_eq!(page["total"].as_u64(), Some(total));
        seen.extend(page["facts"].as_array().unwrap().iter().map(|f| f["id"].as_str().unwrap().to_string()));
        offset = page["next_offset"].as_u64();
    }
    let unique: std::collections::BTreeSet<_> = seen.iter().collect();
    assert_eq!(unique.len(), seen.len(), "a page repeated a fact");
    assert_eq!(seen.len() as u64, total);
    audit(&srv.store).unwrap();
}
