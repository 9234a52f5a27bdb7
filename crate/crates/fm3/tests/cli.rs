use std::path::Path;
use std::process::{Command, Output};

use fm3::config::RunConfig;

fn fm3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fm3")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let mut cfg = RunConfig::suite(3);
    cfg.optimizer.total_steps = 40;
    cfg.optimizer.episode_steps = 10;
    let path = dir.join("small.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn eval_writes_one_record_per_episode_and_report_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("m.ndjson");
    let out_s = out.to_string_lossy();
    let run = fm3(&["eval", "--config", &cfg, "--shots", "4,16,64", "--episodes", "2", "--out", &out_s]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let lines = std::fs::read_to_string(&out).unwrap().lines().count();
    assert_eq!(lines, 6 * 3 * 2);
    assert!(dir.path().join("m.timings.ndjson").exists());

    let csv = dir.path().join("t.csv");
    let rep = fm3(&["report", &out_s, "--metric", "f1", "--csv", &csv.to_string_lossy()]);
    assert!(rep.status.success());
    assert!(String::from_utf8_lossy(&rep.stdout).contains("text_binary"));
    // Header plus one line per (task, k).
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 1 + 6 * 3);
}

#[test]
fn ablate_no_hypernet_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = fm3(&["ablate", "--config", &cfg, "--mode", "no_hypernet", "--shots", "4", "--episodes", "1"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("no_hypernet"));
}

#[test]
fn bad_input_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "global_seed = 1\nnot_a_key = 2\n").unwrap();
    assert_eq!(fm3(&["eval", "--config", &bad.to_string_lossy()]).status.code(), Some(1));
    assert_eq!(fm3(&["ablate", "--mode", "no_such_ablation"]).status.code(), Some(1));
    assert_eq!(fm3(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fm3(&["--help"]).status.code(), Some(0));
    let missing = fm3(&["report", &dir.path().join("none.ndjson").to_string_lossy()]);
    assert_eq!(missing.status.code(), Some(2));
}
