#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use axum::Router;
use chrono::{TimeZone, Utc};

use neusymms_core::extraction::ExtractorConfig;
use neusymms_core::lifecycle::LifecyclePolicy;
use neusymms_core::rules::default_rule_pack;
use neusymms_core::service::MemoryService;
use neusymms_core::store::{FactStore, IdSource, ManualClock};
use neusymms_server::{App, Auth, Principal, Role};

pub const USERS: &[&str] = &["alice", "bob", "carol"];
pub const ADMIN_TOKEN: &str = "admin-token";

pub fn token_of(user: &str) -> String {
    format!("{user}-token")
}

pub fn auth() -> Auth {
    let mut entries: Vec<(String, Principal)> = USERS
        .iter()
        .map(|u| {
            let t = token_of(u);
            let p = Principal::new(&t, Role::User, Some(u.to_string()));
            (t, p)
        })
        .collect();
    entries.push((ADMIN_TOKEN.into(), Principal::new(ADMIN_TOKEN, Role::Admin, None)));
    Auth::new(entries).unwrap()
}

pub struct TestServer {
    pub router: Router,
    pub store: Arc<FactStore>,
    pub clock: Arc<ManualClock>,
}

pub fn server_with(extraction: ExtractorConfig) -> TestServer {
    let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2025, 3, 1, 9, 0, 0).unwrap()));
    let store = Arc::new(FactStore::in_memory(clock.clone(), IdSource::seeded(42)));
    let service =
        MemoryService::new(store.clone(), default_rule_pack(), extraction, LifecyclePolicy::default()).unwrap();
    let app = App::new(Arc::new(service), auth());
    TestServer {
        router: app.router(),
        store,
        clock,
    }
}

pub fn server() -> TestServer {
    server_with(ExtractorConfig::default())
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap()
}
