//! No request authenticated as one user reads or changes another user's
//! facts, over random principals, targets and endpoints.

mod common;

use proptest::prelude::*;
use serde_json::json;

use neusymms_core::model::{Category, MemoryType, Scope};
use neusymms_core::store::{Actor, NewFact};
use neusymms_server::contract::{audit, send};

use common::*;

#[derive(Debug, Clone, Copy)]
enum Caller {
    User(usize),
    Admin,
    Anonymous,
    Bogus,
}

#[derive(Debug, Clone, Copy)]
enum Endpoint {
    Process,
    Context,
    List,
    Summary,
    Clear,
    Patch,
    Delete,
}

const TARGETS: &[&str] = &["alice", "bob", "carol", "dave"];

fn caller() -> impl Strategy<Value = Caller> {
    prop_oneof![
        6 => (0..USERS.len()).prop_map(Caller::User),
        2 => Just(Caller::Admin),
        1 => Just(Caller::Anonymous),
        1 => Just(Caller::Bogus),
    ]
}

fn endpoint() -> impl Strategy<Value = Endpoint> {
    prop::sample::select(vec![
        Endpoint::Process,
        Endpoint::Context,
        Endpoint::List,
        Endpoint::Summary,
        Endpoint::Clear,
        Endpoint::Patch,
        Endpoint::Delete,
    ])
}

fn secret_of(user: &str) -> String {
    format!("secret-{user}")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn principals_only_reach_their_own_facts(caller in caller(), target in 0..TARGETS.len(), ep in endpoint()) {
        let rt = runtime();
        let srv = server();
        let mut ids = std::collections::HashMap::new();
        for user in USERS {
            let f = srv.store.insert(NewFact {
                id: None,
                user_id: user.to_string(),
                scope: Scope::User,
                agent_id: None,
                flow_id: None,
                subject: "user".into(),
                relation: "favorite_color".into(),
                value: secret_of(user),
                category: Category::Preference,
                memory_type: MemoryType::LongTerm,
                confidence: 0.9,
                source_text: String::new(),
            }, Actor::Cli).unwrap();
            ids.insert(*user, f.id);
        }
        let target = TARGETS[target];
        let token = match caller {
            Caller::User(i) => Some(token_of(USERS[i])),
            Caller::Admin => Some(ADMIN_TOKEN.to_string()),
            Caller::Anonymous => None,
            Caller::Bogus => Some("forged".to_string()),
        };
        let fact_path = match ids.get(target) {
            Some(id) => format!("/v1/facts/{id}"),
            None => "/v1/facts/00000000-0000-4000-8000-000000000000".to_string(),
        };
        let (method, path, body) = match ep {
            Endpoint::Process => ("POST", format!("/v1/users/{target}/memory:process"),
                Some(json!({"turns": [{"role": "user", "text": "I live in Lisbon."}]}))),
            Endpoint::Context => ("POST", format!("/v1/users/{target}/memory:context"), None),
            Endpoint::List => ("GET", format!("/v1/users/{target}/facts?active=any"), None),
            Endpoint::Summary => ("GET", format!("/v1/users/{target}/facts/summary"), None),
            Endpoint::Clear => ("POST", format!("/v1/users/{target}/facts:clear"), None),
            Endpoint::Patch => ("PATCH", fact_path, Some(json!({"value": "changed"}))),
            Endpoint::Delete => ("DELETE", fact_path, None),
        };
        let before = srv.store.snapshot();
        let events_before = srv.store.last_sequence();
        let (status, response) = rt.block_on(send(&srv.router, method, &path, token.as_deref(), body.as_ref()));

        let by_fact_id = matches!(ep, Endpoint::Patch | Endpoint::Delete);
        let expected = match caller {
            Caller::Anonymous | Caller::Bogus => 401,
            _ if by_fact_id && !ids.contains_key(target) => 404,
            Caller::User(i) if USERS[i] != target => 403,
            _ => 200,
        };
        prop_assert_eq!(status, expected, "{} {} -> {}", method, path, response);
        if status != 200 {
            prop_assert_eq!(srv.store.last_sequence(), events_before);
            prop_assert_eq!(srv.store.snapshot(), before);
        }
        let text = response.to_string();
        for user in USERS {
            let own = match caller {
                Caller::User(i) => USERS[i] == *user,
                Caller::Admin => true,
                _ => false,
            };
            if !own || status != 200 || *user != target {
                prop_assert!(!text.contains(&secret_of(user)), "{} leaked in {}", user, text);
            }
        }
        audit(&srv.store).map_err(TestCaseError::fail)?;
    }
}
