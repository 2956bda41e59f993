use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn clgt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clgt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn clgt")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Ten students in two teams, one week; every kind has at least three
/// distinct influence values so thresholds can be computed.
fn toy_course(dir: &Path) {
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    let mut roster = String::from("student_id,team_id\n");
    let mut grades = String::from("student_id,week,grade\n");
    for i in 1..=10 {
        let team = if i <= 5 { "t1" } else { "t2" };
        roster.push_str(&format!("s{i:02},{team}\n"));
        let g = ["A", "B", "C"][i % 3];
        grades.push_str(&format!("s{i:02},1,{g}\ns{i:02},final,{g}\n"));
    }
    let mut commits = String::from("student_id,team_id,week,timestamp,file_kind,lines_added,lines_deleted\n");
    let lines = [(10, 5), (20, 1), (70, 4), (5, 2), (15, 8), (30, 2), (30, 3), (40, 5), (12, 9), (3, 1)];
    for (i, (a, d)) in lines.iter().enumerate() {
        let team = if i < 5 { "t1" } else { "t2" };
        let kind = if i % 2 == 0 { "code" } else { "doc" };
        commits.push_str(&format!("s{:02},{team},1,2021-03-01T10:00:00Z,{kind},{a},{d}\n", i + 1));
    }
    let issues = "author_id,author_team,target_team,week,timestamp,severity\n\
                  s01,t1,t2,1,2021-03-02T10:00:00Z,1\n\
                  s06,t2,t1,1,2021-03-02T11:00:00Z,2\n\
                  s07,t2,t1,1,2021-03-02T12:00:00Z,3\n\
                  s03,t1,t2,1,2021-03-02T13:00:00Z,4\n";
    fs::write(data.join("roster.csv"), roster).unwrap();
    fs::write(data.join("grades.csv"), grades).unwrap();
    fs::write(data.join("commits.csv"), commits).unwrap();
    fs::write(data.join("issues.csv"), issues).unwrap();
    fs::write(
        dir.join("clgt.toml"),
        r#"seed = 3

[paths]
data_dir = "data"
out = "out"

[data]
weeks = 1

[model]
hidden_dim = 8
heads = 2
layers = 2

[train]
initial_lr = 0.01
stop_lr = 1e-7
max_epochs = 300
patience = 50
split = { train = 1.0, val = 0.0, test = 0.0 }

[explain]
samples = 100
"#,
    )
    .unwrap();
}

fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    toy_course(dir.path());
    dir
}

/// Every file under `root`, JSON with its `metadata` field removed.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = fs::read(&p).unwrap();
            if p.extension().is_some_and(|e| e == "json") {
                let mut v: Value = serde_json::from_slice(&bytes).unwrap();
                strip_metadata(&mut v);
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(p.strip_prefix(root).unwrap().to_path_buf(), bytes);
        }
    }
    out
}

fn strip_metadata(v: &mut Value) {
    if let Value::Object(m) = v {
        m.remove("metadata");
        for x in m.values_mut() {
            strip_metadata(x);
        }
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn one_week_fixture_yields_three_matrices() {
    let dir = setup();
    let o = clgt(&["build-graph", "--config", "clgt.toml"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("out");
    let mut names: Vec<String> = fs::read_dir(out.join("matrices"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["week_01_addition.csv", "week_01_deletion.csv", "week_01_issue.csv"]);
    assert!(out.join("graphs/week_01.json").is_file());
    assert!(out.join("features/week_01.csv").is_file());
    let t = read_json(&out.join("thresholds.json"));
    for k in ["addition", "deletion", "issue"] {
        assert_eq!(t[k].as_array().unwrap().len(), 2);
    }
    assert_eq!(t["provenance"]["seed"], 3);
    assert_eq!(t["provenance"]["config_hash"].as_str().unwrap().len(), 64);
    assert!(!out.join(".clgt.lock").exists());
}

#[test]
fn build_graph_is_idempotent() {
    let dir = setup();
    assert_eq!(code(&clgt(&["build-graph", "--config", "clgt.toml"], dir.path())), 0);
    let first = snapshot(&dir.path().join("out"));
    assert_eq!(code(&clgt(&["build-graph", "--config", "clgt.toml"], dir.path())), 0);
    assert_eq!(first, snapshot(&dir.path().join("out")));
}

#[test]
fn missing_roster_is_a_validation_error_naming_the_path() {
    let dir = setup();
    fs::remove_file(dir.path().join("data/roster.csv")).unwrap();
    let o = clgt(&["build-graph", "--config", "clgt.toml"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("roster.csv"), "{}", stderr(&o));
}

#[test]
fn malformed_csv_is_a_parse_error() {
    let dir = setup();
    let p = dir.path().join("data/commits.csv");
    let text = fs::read_to_string(&p).unwrap().replacen(",code,", ",binary,", 1);
    fs::write(&p, text).unwrap();
    let o = clgt(&["build-graph", "--config", "clgt.toml"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn bad_config_syntax_and_values() {
    let dir = setup();
    fs::write(dir.path().join("broken.toml"), "seed = [").unwrap();
    assert_eq!(code(&clgt(&["config", "--config", "broken.toml"], dir.path())), 2);
    let o = clgt(&["config", "--config", "clgt.toml", "--set", "model.heads=3"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = clgt(&["config", "--config", "clgt.toml", "--set", "no_such_key=1"], dir.path());
    assert_eq!(code(&o), 2);
    assert_eq!(code(&clgt(&["train", "--no-such-flag"], dir.path())), 2);
}

#[test]
fn command_line_wins_over_file() {
    let dir = setup();
    let o = clgt(&["config", "--config", "clgt.toml", "--set", "seed=5", "--seed", "7"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("seed = 7"));
    assert!(!text.contains("seed = 5"));
    let o = clgt(&["config", "--config", "clgt.toml", "--set", "train.max_epochs=9"], dir.path());
    assert!(stdout(&o).contains("max_epochs = 9"));
    let hash = |o: &Output| stdout(o).lines().next().unwrap().to_string();
    let a = clgt(&["config", "--config", "clgt.toml"], dir.path());
    let b = clgt(&["config", "--config", "clgt.toml"], dir.path());
    let c = clgt(&["config", "--config", "clgt.toml", "--seed", "4"], dir.path());
    assert_eq!(hash(&a), hash(&b));
    assert_ne!(hash(&a), hash(&c));
}

#[test]
fn missing_checkpoint_exits_4() {
    let dir = setup();
    for cmd in ["evaluate", "explain"] {
        let o = clgt(&[cmd, "--config", "clgt.toml"], dir.path());
        assert_eq!(code(&o), 4, "{cmd}: {}", stderr(&o));
        assert!(stderr(&o).contains("checkpoint.json"));
    }
}

#[test]
fn train_overfits_evaluate_and_explain() {
    let dir = setup();
    let o = clgt(&["train", "--config", "clgt.toml"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("out");
    let m = read_json(&out.join("metrics.json"));
    let acc = m["splits"]["train"]["metrics"]["acc"].as_f64().unwrap();
    assert!(acc >= 0.99, "train acc {acc}");
    assert_eq!(m["provenance"]["seed"], 3);
    assert!(out.join("checkpoint.json").is_file());
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,lr,train_loss,val_loss,val_acc\n"));

    let o = clgt(&["evaluate", "--config", "clgt.toml", "--split", "train"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let e = read_json(&out.join("metrics.json"));
    assert_eq!(e["splits"]["train"], m["splits"]["train"]);
    assert!(e["splits"].get("test").is_none());

    let o = clgt(&["explain", "--config", "clgt.toml"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let x = read_json(&out.join("explanation.json"));
    assert_eq!(x["explanation"]["num_vertices"], 10);
    assert_eq!(x["vertices"].as_array().unwrap().len(), 10);
    assert_eq!(x["explanation"]["samples"], 100);
    assert_eq!(x["week"], 1);
    let dot = fs::read_to_string(out.join("influence.dot")).unwrap();
    assert!(dot.contains("digraph influence"));
    assert_eq!(dot.matches("[label=\"s").count(), 10);

    let o = clgt(&["export-viz", "influence", "--config", "clgt.toml"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("influence.dot")).unwrap(), dot);
}

#[test]
fn train_is_idempotent() {
    let dir = setup();
    let args = ["train", "--config", "clgt.toml", "--set", "train.max_epochs=5"];
    assert_eq!(code(&clgt(&args, dir.path())), 0);
    let first = snapshot(&dir.path().join("out"));
    assert_eq!(code(&clgt(&args, dir.path())), 0);
    assert_eq!(first, snapshot(&dir.path().join("out")));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = setup();
    fs::create_dir_all(dir.path().join("out")).unwrap();
    fs::write(dir.path().join("out/.clgt.lock"), "").unwrap();
    let o = clgt(&["build-graph", "--config", "clgt.toml"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("locked"));
    assert!(!dir.path().join("out/matrices").exists());
}

fn explanation_json(edges: &str) -> String {
    format!(
        r#"{{"num_vertices": 3, "edges": [{edges}], "targets": [], "samples": 10,
            "config": {{"samples": 10, "p": 0.5, "alpha": 0.05, "max_parents": 3, "seed": 0,
                        "encoding": "changed", "test": "chi_square", "pair_lookahead": true, "targets": null}}}}"#
    )
}

#[test]
fn export_influence_dot() {
    let dir = setup();
    fs::write(dir.path().join("empty.json"), explanation_json("")).unwrap();
    let o = clgt(&["export-viz", "influence", "--input", "empty.json", "--out", "viz"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dot = fs::read_to_string(dir.path().join("viz/influence.dot")).unwrap();
    assert!(dot.contains("digraph influence {"));
    assert_eq!(dot.matches("[label=").count(), 3);
    assert!(!dot.contains("->"));

    let edge = r#"{"src": 0, "dst": 2, "weight": 0.5, "p_value": 0.001}"#;
    fs::write(dir.path().join("one.json"), explanation_json(edge)).unwrap();
    let o = clgt(&["export-viz", "influence", "--input", "one.json", "--out", "viz"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dot = fs::read_to_string(dir.path().join("viz/influence.dot")).unwrap();
    assert_eq!(dot.matches("->").count(), 1);
    assert!(dot.contains("0 -> 2 [penwidth=2.750"));
}

#[test]
fn export_influence_rejects_malformed_input() {
    let dir = setup();
    fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let o = clgt(&["export-viz", "influence", "--input", "bad.json"], dir.path());
    assert_eq!(code(&o), 2);
    let edge = r#"{"src": 0, "dst": 7, "weight": 0.5, "p_value": 0.001}"#;
    fs::write(dir.path().join("range.json"), explanation_json(edge)).unwrap();
    let o = clgt(&["export-viz", "influence", "--input", "range.json"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn export_activity_groups_teams() {
    let dir = setup();
    let o = clgt(&["export-viz", "activity", "--config", "clgt.toml"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/activity.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "student_id,team_id,week_01");
    assert_eq!(rows.len(), 11);
    let teams: Vec<&str> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(teams, ["t1", "t1", "t1", "t1", "t1", "t2", "t2", "t2", "t2", "t2"]);
}

#[test]
fn synth_then_build_full_course() {
    let dir = tempfile::tempdir().unwrap();
    let o = clgt(&["synth", "--out", "course", "--seed", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = clgt(&["build-graph", "--config", "course/clgt.toml"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let n = fs::read_dir(dir.path().join("course/run/matrices")).unwrap().count();
    assert_eq!(n, 48);
    let o = clgt(&["export-viz", "activity", "--config", "course/clgt.toml"], dir.path());
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(dir.path().join("course/run/activity.csv")).unwrap();
    assert_eq!(text.lines().count(), 76);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 18);
}
