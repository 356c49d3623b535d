use std::fs;
use std::process::{Command, Output};

fn gensynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gensynth")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_upstream_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = gensynth(&["prompts", "--mock", "--run-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("run `gensynth caption` first"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[prompts]\nbatch = \"many\"\n").unwrap();
    let o = gensynth(&["--config", cfg.to_str().unwrap(), "prepare", "--mock"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("prompts.batch"), "{}", stderr(&o));
}

#[test]
fn unchanged_stages_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().to_str().unwrap();
    let args = ["run", "--mock", "--stages", "prepare,caption,edges", "--run-dir", run];
    let first = gensynth(&args);
    assert!(first.status.success(), "{}", stderr(&first));
    let stamp = fs::read(dir.path().join(".stages/caption-r24.json")).unwrap();

    let second = gensynth(&args);
    assert!(second.status.success());
    let err = stderr(&second);
    for stage in ["prepare", "caption-r24", "edges"] {
        assert!(err.contains(&format!("[{stage}] inputs unchanged, skipped")), "{err}");
    }
    assert_eq!(fs::read(dir.path().join(".stages/caption-r24.json")).unwrap(), stamp);

    let forced = gensynth(&["caption", "--mock", "--force", "--run-dir", run]);
    assert!(stderr(&forced).contains("[caption-r24] wrote"), "{}", stderr(&forced));
}

#[test]
fn standalone_report() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs.jsonl");
    fs::write(
        &runs,
        "{\"config\":\"real\",\"regime\":\"r8\",\"seed\":0,\"map50\":62.0,\"map5095\":50.0}\n\
         {\"config\":\"real\",\"regime\":\"r8\",\"seed\":1,\"map50\":64.0,\"map5095\":52.0}\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = gensynth(&["report", "--runs", runs.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("table_map.txt")).unwrap();
    assert!(table.contains("real only") && table.contains("63.0 [1.4]"), "{table}");
    assert!(out.join("bars.csv").exists() && out.join("aggregate.json").exists());
}
