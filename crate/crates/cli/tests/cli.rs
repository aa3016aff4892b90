use std::path::PathBuf;
use std::process::{Command, Output};

fn tagrace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tagrace")).args(args).output().expect("binary runs")
}

fn corpus(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "core", "corpus", &format!("{name}.dsl")].iter().collect();
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json_lines(o: &Output) -> Vec<serde_json::Value> {
    stdout(o).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn exit_codes_follow_findings() {
    assert_eq!(tagrace(&["run", &corpus("case_e")]).status.code(), Some(1));
    assert_eq!(tagrace(&["run", &corpus("case_b")]).status.code(), Some(0));
    // ReaderILU alone is not a finding
    assert_eq!(tagrace(&["run", &corpus("case_d"), "--engine", "tbri"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dsl");
    std::fs::write(&bad, "thread t { frobnicate A }\n").unwrap();
    let o = tagrace(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
    assert_eq!(tagrace(&["run", "/nonexistent/x.dsl"]).status.code(), Some(2));
}

#[test]
fn run_json_records() {
    let o = tagrace(&["run", &corpus("case_e"), "--format", "json"]);
    let lines = json_lines(&o);
    let reports: Vec<_> = lines.iter().filter(|v| v["record"] == "report").collect();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r["kind"], "DataRace");
        assert_eq!(r["engine"], "tbri");
        assert_eq!(r["program"], "case_e");
        assert_eq!(r["pointee"], "A");
        assert_eq!(r["prior_event_type"], "WR");
        assert_eq!(r["ref_tag"], 0);
    }
    assert_eq!(lines.iter().filter(|v| v["record"] == "racy_pair").count(), 2);
    let summary = lines.last().unwrap();
    assert_eq!(summary["record"], "summary");
    assert_eq!(summary["traces"], 2);
    let quiet = json_lines(&tagrace(&["run", &corpus("case_e"), "--format", "json", "--quiet"]));
    assert_eq!(quiet, vec![summary.clone()]);
}

#[test]
fn trace_file_input() {
    let dir = tempfile::tempdir().unwrap();
    let prog = dir.path().join("p.dsl");
    std::fs::write(&prog, "pointee A size 16\nthread t1 { write A }\nthread t2 { write A }\n").unwrap();
    // main allocates A and spawns both workers before they run
    let trace = r#"[
        {"seq":0,"tid":0,"op":"ALLOC","pointee":"A"},
        {"seq":1,"tid":0,"op":"SPAWN","child":1},
        {"seq":2,"tid":0,"op":"SPAWN","child":2},
        {"seq":3,"tid":1,"op":"WR","pointee":"A","offset":0,"alias":"A"},
        {"seq":4,"tid":2,"op":"WR","pointee":"A","offset":0,"alias":"A"},
        {"seq":5,"tid":0,"op":"JOIN","child":1},
        {"seq":6,"tid":0,"op":"JOIN","child":2},
        {"seq":7,"tid":0,"op":"FREE","pointee":"A"}
    ]"#;
    let tp = dir.path().join("t.json");
    std::fs::write(&tp, trace).unwrap();
    let o = tagrace(&["run", prog.to_str().unwrap(), "--trace", tp.to_str().unwrap(), "--format", "json"]);
    let lines = json_lines(&o);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let r = lines.iter().find(|v| v["record"] == "report").unwrap();
    assert_eq!(r["event_seq"], 4);
    assert_eq!(r["accessor_tid"], 2);
    std::fs::write(&tp, trace.replace(r#""seq":4"#, r#""seq":9"#)).unwrap();
    assert_eq!(tagrace(&["run", prog.to_str().unwrap(), "--trace", tp.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn seeded_schedule_is_reproducible() {
    let args = ["run", &corpus("syn_missing_lock_race"), "--schedule", "seed", "--seed", "17", "--format", "json"];
    let first = tagrace(&args).stdout;
    for _ in 0..10 {
        assert_eq!(tagrace(&args).stdout, first);
    }
}

#[test]
fn cases_list_and_run() {
    let a = tagrace(&["cases", "list"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, tagrace(&["cases", "list"]).stdout);
    let text = stdout(&a);
    assert_eq!(text.lines().count(), 23);
    assert!(text.lines().next().unwrap().starts_with("case_a"));

    let o = tagrace(&["cases", "run"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("23/23 cases pass"));
}

#[test]
fn mislabeled_manifest_fails_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("manifest.json");
    std::fs::write(&m, r#"[{"name":"case_e","category":"CASE_E","race":false,"ilu":false}]"#).unwrap();
    let o = tagrace(&["cases", "run", "--manifest", m.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("FAIL case_e"));
    std::fs::write(&m, "{not json").unwrap();
    assert_eq!(tagrace(&["cases", "run", "--manifest", m.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn empty_fuzz_campaign() {
    let o = tagrace(&["fuzz", "0", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v = &json_lines(&o)[0];
    assert_eq!(v["record"], "fuzz_summary");
    assert_eq!(v["programs"], 0);
    assert_eq!(v["unconfirmed"], 0);
    assert_eq!(tagrace(&["fuzz", "1", "--max-threads", "9"]).status.code(), Some(2));
}

#[test]
fn metrics_from_reports() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    std::fs::write(
        &m,
        r#"[{"name":"a","category":"LD","race":false,"ilu":false},{"name":"b","category":"LD","race":false,"ilu":false}]"#,
    )
    .unwrap();
    let r = dir.path().join("r.jsonl");
    std::fs::write(&r, "").unwrap();
    let o = tagrace(&["metrics", "--manifest", m.to_str().unwrap(), "--reports", r.to_str().unwrap(), "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v = &json_lines(&o)[0];
    assert_eq!(v["accuracy"], 1.0);
    assert_eq!(v["tn"], 2);
    assert!(v["precision"].is_null());

    std::fs::write(&r, r#"{"record":"report","program":"zzz","trace":0,"kind":"DataRace"}"#).unwrap();
    let o = tagrace(&["metrics", "--manifest", m.to_str().unwrap(), "--reports", r.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corpus_reports_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("r.jsonl");
    std::fs::write(&r, tagrace(&["cases", "run", "--format", "json"]).stdout).unwrap();
    for exec in ["1", "5", "20"] {
        let o = tagrace(&["metrics", "--reports", r.to_str().unwrap(), "--executions", exec, "--format", "json"]);
        let v = &json_lines(&o)[0];
        assert_eq!((v["fp"].as_u64(), v["fn"].as_u64()), (Some(0), Some(0)), "executions {exec}");
        assert_eq!(v["precision"], 1.0);
    }
}
