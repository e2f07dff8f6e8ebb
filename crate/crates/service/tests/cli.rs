use std::path::Path;
use std::process::{Command, Output};

use archplate_core::design_search::Candidate;
use archplate_core::world_env::import_trajectory;

const BIN: &str = env!("CARGO_BIN_EXE_archplate");

fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn run(args: &[&str]) -> Output {
    let out = Command::new(BIN).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn simulate_writes_a_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = write(dir.path(), "mesh.json", r#"{"tiling": [2, 2, 1]}"#);
    let actions = write(dir.path(), "actions.json", "[[1, 0, 0, 0], [0, 0, 1, 0]]");
    let out = dir.path().join("t.bin");
    let stdout = run(&[
        "simulate",
        "--graph",
        &fixture("lattice_graph.json"),
        "--material",
        &fixture("material_neo_hookean.json"),
        "--actions",
        &actions,
        "--mesh-config",
        &mesh,
        "--out",
        out.to_str().unwrap(),
    ])
    .stdout;
    let traj = import_trajectory(&out).unwrap();
    assert_eq!(traj.frames.len(), 3);
    assert_eq!(traj.frames[2].cumulative_action, [1.0, 0.0, 1.0, 0.0]);
    assert!(String::from_utf8(stdout).unwrap().starts_with("3 frames"));
}

#[test]
fn dataset_covers_every_graph() {
    let dir = tempfile::tempdir().unwrap();
    let graphs = dir.path().join("graphs");
    std::fs::create_dir(&graphs).unwrap();
    std::fs::copy(fixture("lattice_graph.json"), graphs.join("a.json")).unwrap();
    std::fs::write(graphs.join("b.json"), archplate_core::lattice_graph::LatticeGraph::body_centered(0.1).to_json()).unwrap();
    let mesh = write(dir.path(), "mesh.json", r#"{"tiling": [2, 2, 1]}"#);
    let out = dir.path().join("data");
    run(&[
        "dataset",
        "--graphs",
        graphs.to_str().unwrap(),
        "--trajectories",
        "2",
        "--steps",
        "2",
        "--seed",
        "4",
        "--mesh-config",
        &mesh,
        "--out",
        out.to_str().unwrap(),
    ]);
    let index: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(out.join("index.json")).unwrap()).unwrap();
    let names: Vec<&str> = index.iter().map(|e| e["graph"].as_str().unwrap()).collect();
    assert_eq!(names, ["a", "b"]);
    for e in &index {
        assert_eq!(import_trajectory(&out.join(e["file"].as_str().unwrap())).unwrap().frames.len(), 3);
    }
}

#[test]
fn proxy_search_writes_a_reproducible_log() {
    let dir = tempfile::tempdir().unwrap();
    let seed = write(dir.path(), "seed.json", &archplate_core::lattice_graph::LatticeGraph::branched_seed().to_json());
    let config = write(dir.path(), "config.json", r#"{"beam_width": 2, "mutations_per_parent": 3, "iterations": 3, "seed": 9}"#);
    let logs: Vec<String> = (0..2)
        .map(|k| {
            let out = dir.path().join(format!("log{k}.jsonl"));
            run(&["search", "--seed", &seed, "--config", &config, "--evaluator", "proxy", "--out", out.to_str().unwrap()]);
            std::fs::read_to_string(out).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    let candidates: Vec<Candidate> = logs[0].lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(candidates[0].id, 0);
    assert!(candidates.len() > 4);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let out = Command::new(BIN).args(["simulate", "--graph", "/nonexistent.json", "--material", "x", "--out", "y"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent.json"));
    let out = Command::new(BIN).args(["serve", "--bind", "not-an-address"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn serve_reads_the_bind_address_from_the_environment() {
    let out = Command::new(BIN).args(["serve"]).env("LEIA_BIND", "still-not-an-address").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("still-not-an-address"));
}
