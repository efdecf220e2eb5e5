//! Recorded request/response suites and the journal audit run after them.
//!
//! A suite is JSON: the facts to seed, then cases of one request and the
//! expected status and body. Expected bodies match structurally: objects
//! need only the listed keys, arrays must have the same length, scalars
//! must be equal, and the string `"*"` matches anything. Paths and bodies
//! may name a fact as `{fact:subject/relation/value}`, which resolves to
//! its id.

use std::collections::BTreeMap;
use std::path::Path;

use axum::body::Body;
use axum::http::{header, Method, Request};
use axum::Router;
use http_body_util::BodyExt;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tower::ServiceExt;

use neusymms_core::scenario::SeedFact;
use neusymms_core::store::{Actor, ActiveFilter, FactQuery, FactStore, IdSource};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordedSuite {
    pub name: String,
    /// Seed facts per user.
    #[serde(default)]
    pub seed: BTreeMap<String, Vec<SeedFact>>,
    pub cases: Vec<RecordedCase>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordedCase {
    pub name: String,
    pub method: String,
    pub path: String,
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default)]
    pub body: Option<Value>,
    pub status: u16,
    #[serde(default)]
    pub expect: Option<Value>,
    /// Whether the request must leave the journal as it was.
    #[serde(default)]
    pub read_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl RecordedSuite {
    pub fn from_path(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn seed_into(&self, store: &FactStore) -> Result<(), String> {
        for (user, facts) in &self.seed {
            for (i, f) in facts.iter().enumerate() {
                store
                    .insert(f.to_new_fact(user), Actor::Cli)
                    .map_err(|e| format!("seed {user}[{i}]: {e}"))?;
            }
        }
        Ok(())
    }
}

/// Whether `actual` has the shape `expected` asks for; on mismatch,
/// the JSON path where they differ.
pub fn matches_shape(expected: &Value, actual: &Value) -> Result<(), String> {
    fn walk(path: &mut String, expected: &Value, actual: &Value) -> Result<(), String> {
        match (expected, actual) {
            (Value::String(w), _) if w == "*" => Ok(()),
            (Value::Object(e), Value::Object(a)) => {
                for (k, ev) in e {
                    let len = path.len();
                    path.push('.');
                    path.push_str(k);
                    let av = a.get(k).ok_or_else(|| format!("{path}: missing"))?;
                    walk(path, ev, av)?;
                    path.truncate(len);
                }
                Ok(())
            }
            (Value::Array(e), Value::Array(a)) => {
                if e.len() != a.len() {
                    return Err(format!("{path}: expected {} items, got {}", e.len(), a.len()));
                }
                for (i, (ev, av)) in e.iter().zip(a).enumerate() {
                    let len = path.len();
                    path.push_str(&format!("[{i}]"));
                    walk(path, ev, av)?;
                    path.truncate(len);
                }
                Ok(())
            }
            (Value::Number(e), Value::Number(a)) if e.as_f64() == a.as_f64() => Ok(()),
            (e, a) if e == a => Ok(()),
            (e, a) => Err(format!("{path}: expected {e}, got {a}")),
        }
    }
    walk(&mut String::from("$"), expected, actual)
}

/// Replaces `{fact:subject/relation/value}` with the id of the matching
/// fact (active or not) of any user.
pub fn resolve_refs(text: &str, store: &FactStore) -> Result<String, String> {
    let mut out = String::new();
    let mut rest = text;
    while let Some(start) = rest.find("{fact:") {
        out.push_str(&rest[..start]);
        let end = rest[start..]
            .find('}')
            .ok_or_else(|| format!("unterminated reference in `{text}`"))?;
        let key = &rest[start + 6..start + end];
        let parts: Vec<&str> = key.splitn(3, '/').collect();
        let [subject, relation, value] = parts[..] else {
            return Err(format!("bad reference `{key}`"));
        };
        let id = store
            .users()
            .into_iter()
            .find_map(|user| {
                let page = store
                    .query(&FactQuery {
                        subject: Some(subject.to_string()),
                        relation: Some(relation.to_string()),
                        active: ActiveFilter::Any,
                        ..FactQuery::user(user)
                    })
                    .ok()?;
                page.facts.into_iter().find(|f| f.value == value).map(|f| f.id)
            })
            .ok_or_else(|| format!("no fact matches `{key}`"))?;
        out.push_str(&id.to_string());
        rest = &rest[start + end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Sends one request and returns the status and the parsed body.
pub async fn send(router: &Router, method: &str, path: &str, token: Option<&str>, body: Option<&Value>) -> (u16, Value) {
    let method: Method = method.parse().expect("valid method");
    let mut req = Request::builder().method(method).uri(path);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(v).expect("json"))
        }
        None => Body::empty(),
    };
    let response = router
        .clone()
        .oneshot(req.body(body).expect("request"))
        .await
        .expect("router is infallible");
    let status = response.status().as_u16();
    let bytes = response.into_body().collect().await.expect("body").to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

/// Runs one case against `router`, whose store is `store`.
pub async fn run_case(router: &Router, store: &FactStore, case: &RecordedCase) -> CaseOutcome {
    let outcome = |passed: bool, detail: String| CaseOutcome {
        name: case.name.clone(),
        passed,
        detail,
    };
    let path = match resolve_refs(&case.path, store) {
        Ok(p) => p,
        Err(e) => return outcome(false, e),
    };
    let body = match &case.body {
        Some(b) => match resolve_refs(&b.to_string(), store).map(|t| serde_json::from_str::<Value>(&t)) {
            Ok(Ok(v)) => Some(v),
            Ok(Err(e)) => return outcome(false, e.to_string()),
            Err(e) => return outcome(false, e),
        },
        None => None,
    };
    let before = store.last_sequence();
    let (status, actual) = send(router, &case.method, &path, case.token.as_deref(), body.as_ref()).await;
    if status != case.status {
        return outcome(false, format!("status {status}, expected {}: {actual}", case.status));
    }
    if let Some(expected) = &case.expect {
        if let Err(e) = matches_shape(expected, &actual) {
            return outcome(false, e);
        }
    }
    if case.read_only && store.last_sequence() != before {
        return outcome(false, format!("journal moved from {before} to {}", store.last_sequence()));
    }
    outcome(true, format!("{} {path} -> {status}", case.method))
}

/// Rebuilds a store from its journal and compares it with the live state.
pub fn audit(store: &FactStore) -> Result<(), String> {
    let events = store.events();
    for (i, e) in events.iter().enumerate() {
        if e.seq != i as u64 + 1 {
            return Err(format!("journal position {i} holds sequence {}", e.seq));
        }
    }
    let rebuilt = FactStore::restore(events, store.clock().clone(), IdSource::Random).map_err(|e| e.to_string())?;
    let (live, replayed) = (store.snapshot(), rebuilt.snapshot());
    if live.facts != replayed.facts {
        let diverged = live
            .facts
            .iter()
            .zip(&replayed.facts)
            .find(|(a, b)| a != b)
            .map(|(a, _)| a.id.to_string())
            .unwrap_or_else(|| format!("{} live facts, {} replayed", live.facts.len(), replayed.facts.len()));
        return Err(format!("replay diverges at {diverged}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn shape_matching() {
        let actual = json!({"a": 1, "b": [{"x": 1, "y": 2}], "c": "s"});
        assert!(matches_shape(&json!({"b": [{"y": 2}]}), &actual).is_ok());
        assert!(matches_shape(&json!({"a": 1.0}), &actual).is_ok());
        assert_eq!(matches_shape(&json!({"b": []}), &actual).unwrap_err(), "$.b: expected 0 items, got 1");
        assert_eq!(matches_shape(&json!({"d": 1}), &actual).unwrap_err(), "$.d: missing");
        assert!(matches_shape(&json!({"c": "t"}), &actual).is_err());
        assert!(matches_shape(&json!({"b": ["*"], "a": "*"}), &actual).is_ok());
    }
}
