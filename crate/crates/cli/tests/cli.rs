use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neusymms"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn replay_into(dir: &Path, name: &str) {
    let path = scenario(name);
    let o = run(&["replay", path.to_str().unwrap(), "--store", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn every_shipped_scenario_replays() {
    for name in ["google_move", "cat_died", "toronto", "read_path", "lifecycle_thresholds"] {
        let path = scenario(name);
        let o = run(&["replay", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}{}", stdout(&o), stderr(&o));
        assert!(stdout(&o).contains(&format!("scenario {name} passed")), "{}", stdout(&o));
    }
}

#[test]
fn failed_expectation_exits_one() {
    let text = std::fs::read_to_string(scenario("google_move")).unwrap();
    let bad = text.replacen(r#""value": "Google", "memory_type""#, r#""value": "Meta", "memory_type""#, 1);
    assert_ne!(bad, text);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stale.json");
    std::fs::write(&path, bad).unwrap();
    let o = run(&["replay", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("expect_state"), "{}", stdout(&o));
}

#[test]
fn malformed_scenario_exits_two_and_names_the_step() {
    let text = std::fs::read_to_string(scenario("cat_died")).unwrap();
    let bad = text.replacen(r#""op": "process""#, r#""op": "procss""#, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, bad).unwrap();
    let o = run(&["replay", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bad.json") && err.contains("step 1"), "{err}");

    let o = run(&["replay", "/nonexistent/scenario.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn json_reports_parse() {
    let path = scenario("toronto");
    let o = run(&["replay", "--json", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let report: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["name"], "toronto");
}

#[test]
fn listing_filters_by_category() {
    let dir = tempfile::tempdir().unwrap();
    replay_into(dir.path(), "read_path");
    let store = dir.path().to_str().unwrap();
    let o = run(&["facts", "ls", "--store", store, "--user", "user-1", "--category", "skill"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 2, "{rows:?}");
    assert!(rows.iter().all(|r| r.contains("speaks_language")));
    assert!(stderr(&o).contains("2 of 2 facts"));

    let o = run(&["facts", "ls", "--store", store, "--user", "user-1", "--json", "--limit", "1"]);
    let fact: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(fact["value"], "Google");

    let o = run(&["facts", "ls", "--store", store, "--user", "user-1", "--category", "hobby"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn prune_removes_unread_short_term_facts() {
    let dir = tempfile::tempdir().unwrap();
    replay_into(dir.path(), "lifecycle_thresholds");
    let store = dir.path().to_str().unwrap();
    // The scenario already pruned its stale fact; the rest are long-term.
    let o = run(&["prune", "--store", store, "--now", "2025-03-05T00:00:00Z"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["pruned"].as_array().unwrap().len(), 0);

    let fresh = tempfile::tempdir().unwrap();
    replay_into(fresh.path(), "cat_died");
    let store = fresh.path().to_str().unwrap();
    let listed = run(&["facts", "ls", "--store", store, "--user", "user-1", "--active", "any", "--json"]);
    let id = serde_json::from_str::<Value>(stdout(&listed).lines().next().unwrap()).unwrap()["id"]
        .as_str()
        .unwrap()
        .to_owned();
    let o = run(&["facts", "edit", "--store", store, &id, "--active", "true", "--type", "short_term"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    // The fact was created at the scenario start, 2025-03-01T09:00Z.
    let early = run(&["prune", "--store", store, "--now", "2025-03-02T08:59:00Z"]);
    let report: Value = serde_json::from_str(&stdout(&early)).unwrap();
    assert_eq!(report["pruned"].as_array().unwrap().len(), 0);
    let o = run(&["prune", "--store", store, "--now", "2025-03-02T10:00:00Z"]);
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["pruned"].as_array().unwrap().len(), 1, "{report}");

    let o = run(&["facts", "summary", "--store", store, "--user", "user-1"]);
    assert_eq!(stdout(&o).trim(), "active 0  long-term 0  short-term 0  inactive 1");
}

#[test]
fn edit_and_clear() {
    let dir = tempfile::tempdir().unwrap();
    replay_into(dir.path(), "toronto");
    let store = dir.path().to_str().unwrap();

    let o = run(&["facts", "edit", "--store", store, "4e6c2c1b-0000-4000-8000-000000000000", "--value", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("4e6c2c1b"), "{}", stderr(&o));
    let o = run(&["facts", "edit", "--store", store, "not-a-uuid", "--value", "x"]);
    assert_eq!(o.status.code(), Some(2));

    let listed = run(&["facts", "ls", "--store", store, "--user", "user-1", "--json", "--search", "toronto"]);
    let fact: Value = serde_json::from_str(stdout(&listed).trim()).unwrap();
    let id = fact["id"].as_str().unwrap();
    let o = run(&["facts", "edit", "--store", store, id]);
    assert_eq!(o.status.code(), Some(2), "an edit with no fields is refused");
    let o = run(&["facts", "edit", "--store", store, id, "--value", "Ottawa", "--confidence", "0.8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let edited: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(edited["value"], "Ottawa");
    assert_eq!(edited["confidence"], 0.8);
    let o = run(&["facts", "edit", "--store", store, id, "--confidence", "1.5"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["facts", "clear", "--store", store, "--user", "user-1"]);
    assert_eq!(stdout(&o).trim(), "cleared 2 facts");
    let o = run(&["compact", "--store", store, "--drop-inactive"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("0 facts kept"), "{}", stdout(&o));
}

#[test]
fn missing_store_and_bad_config_exit_two() {
    let o = run(&["facts", "summary", "--store", "/nonexistent/store", "--user", "u"]);
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("server.toml");
    std::fs::write(&cfg, "bind = \"127.0.0.1:0\"\nstore_dir = \"store\"\nbogus = 1\n").unwrap();
    let o = run(&["serve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}
