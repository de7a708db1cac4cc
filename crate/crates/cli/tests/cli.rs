use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn itflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itflow")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn compile_then_verify_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("demo");
    let o = itflow(&["compile", "--bundled", "demo", "-o", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["graph.json", "fusion.json", "fusion.txt", "sizing.json", "memory.json", "allocation.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let graph = out.join("graph.json");
    assert_eq!(code(&itflow(&["verify", path(&graph)])), 0);
    let r = itflow(&["report", path(&graph), "--json"]);
    assert_eq!(code(&r), 0);
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(v["groups"].as_object().unwrap().len(), 1);

    // Same inputs, byte-identical artifacts.
    let again = dir.path().join("again");
    assert_eq!(code(&itflow(&["compile", "--bundled", "demo", "-o", path(&again)])), 0);
    for f in ["graph.json", "sizing.json", "memory.json"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn transformer_fuses_into_one_group() {
    let dir = tempfile::tempdir().unwrap();
    let o = itflow(&["compile", "--bundled", "transformer", "-o", path(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("fusion.json")).unwrap()).unwrap();
    assert_eq!(plan["groups"].as_array().unwrap().len(), 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Budget too small for any kernel.
    let o = itflow(&["compile", "--bundled", "demo", "--cmax", "16", "-o", path(dir.path())]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hint:"));

    // Malformed input.
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&itflow(&["compile", path(&bad), "-o", path(dir.path())])), 2);
    assert_eq!(code(&itflow(&["verify", path(&bad)])), 2);

    // Analytic model off and no profiles: the error names a node.
    let o = itflow(&["compile", "--bundled", "demo", "--no-model", "-o", path(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mm"));
}

#[test]
fn corrupted_depth_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&itflow(&["compile", "--bundled", "transformer", "-o", path(dir.path())])), 0);
    let graph = dir.path().join("graph.json");
    let mut g: serde_json::Value = serde_json::from_str(&fs::read_to_string(&graph).unwrap()).unwrap();
    let edge = g["edges"]
        .as_array_mut()
        .unwrap()
        .iter_mut()
        .filter(|e| e["depth"].as_u64().is_some_and(|d| d > 1))
        .max_by_key(|e| e["depth"].as_u64())
        .unwrap();
    edge["depth"] = 1.into();
    let broken = dir.path().join("broken.json");
    fs::write(&broken, serde_json::to_string(&g).unwrap()).unwrap();
    assert_eq!(code(&itflow(&["verify", path(&broken)])), 4);
}

#[test]
fn simulate_prints_a_trace_and_occupancy() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&itflow(&["compile", "--bundled", "demo", "-o", path(dir.path())])), 0);
    let csv = dir.path().join("occ.csv");
    let o = itflow(&["simulate", path(&dir.path().join("graph.json")), "--occupancy", path(&csv)]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["outcome"], "completed");
    assert!(fs::read_to_string(csv).unwrap().starts_with("cycle,fifo,occupancy"));
    let o = itflow(&["simulate", path(&dir.path().join("graph.json")), "--horizon", "10"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn explore_is_repeatable_and_persists_trials() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = itflow(&[
            "explore", "--bundled", "demo", "--seed", "5", "--trials", "3", "-o", path(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (
            fs::read(out.join("trials.jsonl")).unwrap(),
            fs::read(out.join("best_tiles.json")).unwrap(),
            fs::read(out.join("graph.json")).unwrap(),
        )
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert_eq!(String::from_utf8_lossy(&a.0).lines().count(), 3);

    let one = dir.path().join("one");
    let o = itflow(&["explore", "--bundled", "demo", "--trials", "1", "-o", path(&one)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(one.join("trials.jsonl")).unwrap().lines().count(), 1);

    let none = dir.path().join("none");
    let o = itflow(&["explore", "--bundled", "demo", "--cmax", "16", "--grid", "-o", path(&none)]);
    assert_eq!(code(&o), 3);
    assert!(none.join("trials.jsonl").exists());
}
