use std::process::Command;

fn spillway() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spillway"))
}

#[test]
fn demo_wordcount_checks_against_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = spillway()
        .args(["demo-wordcount", "--size", "300000", "--vocabulary", "2000", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("matches the oracle"), "{stdout}");
    assert!(dir.path().join("final").exists());
}

#[test]
fn submit_runs_pipelines_over_local_storage() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("store");
    std::fs::create_dir_all(root.join("data/in")).unwrap();
    std::fs::write(root.join("data/in/text"), "b a b\nc\n").unwrap();
    let settings = dir.path().join("settings.yaml");
    std::fs::write(
        &settings,
        format!(
            "storage:\n  backend: local\n  root: {}\nmetastore:\n  backend: memory\nclient:\n  poll_interval_ms: 10\n",
            root.display()
        ),
    )
    .unwrap();
    let pipelines = dir.path().join("p.json");
    std::fs::write(
        &pipelines,
        r#"[{"name":"wc","stages":["identity_map","wordcount_map"],"reduce":"sum_reduce",
             "base":{"input_prefixes":["in/"],"output_prefix":"out","num_mappers":2,"num_reducers":1,"run_finalizer":true}},
            {"name":"broken","stages":["wordcount_map"],"reduce":"no_such_reduce",
             "base":{"input_prefixes":["in/"],"output_prefix":"out2","num_mappers":1,"num_reducers":1}}]"#,
    )
    .unwrap();
    let out = spillway().arg("--settings").arg(&settings).arg("submit").arg(&pipelines).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(1), "{stdout}");
    assert!(stdout.contains("wc: COMPLETED"), "{stdout}");
    assert!(stdout.contains("broken: ERROR"), "{stdout}");
    let mut lines: Vec<String> = std::fs::read_to_string(root.join("data/out/final"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    lines.sort();
    assert_eq!(lines, ["a\t1", "b\t2", "c\t1"]);
}

#[test]
fn bad_input_exits_nonzero() {
    let out = spillway().args(["submit", "/nonexistent/p.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = spillway().args(["status", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no such job"));
}
