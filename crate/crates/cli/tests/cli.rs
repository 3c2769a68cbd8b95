//! End-to-end checks of the command-line surface: every subcommand, file
//! round trips, and exit codes on contract errors.

use std::path::Path;
use std::process::Command;

fn lamcast() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lamcast"))
}

fn run_ok(args: &[&str]) -> String {
    let out = lamcast().args(args).output().expect("spawn lamcast");
    assert!(
        out.status.success(),
        "lamcast {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_err(args: &[&str]) -> String {
    let out = lamcast().args(args).output().expect("spawn lamcast");
    assert!(
        !out.status.success(),
        "lamcast {args:?} unexpectedly succeeded"
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();

    run_ok(&[
        "gen-data", "--grid", "24x24", "--n-traj", "3", "--len", "24", "--seed", "5",
        "--boundary", "6", "--out", &p("data"),
    ]);
    assert!(dir.path().join("data/stats.bin").exists());
    assert!(dir.path().join("data/traj_0002.bin").exists());

    let out = run_ok(&[
        "build-graph", "--grid", "24x24", "--levels", "2", "--n1", "6", "--variant",
        "multiscale", "--boundary", "6", "--data", &p("data"), "--out", &p("graph.bin"),
    ]);
    assert!(out.contains("36 mesh nodes"), "got: {out}");

    run_ok(&[
        "train", "--graph", &p("graph.bin"), "--data", &p("data"), "--variant", "multiscale",
        "--phase", "1", "--epochs", "2", "--seed", "1", "--latent", "8", "--out", &p("p1.bin"),
    ]);
    assert!(dir.path().join("p1.bin").exists());
    let curve = std::fs::read_to_string(dir.path().join("p1.loss.csv")).unwrap();
    assert!(curve.starts_with("epoch,loss\n"));
    assert_eq!(curve.lines().count(), 3);

    run_ok(&[
        "train", "--graph", &p("graph.bin"), "--data", &p("data"), "--variant", "multiscale",
        "--phase", "2", "--epochs", "1", "--seed", "2", "--init", &p("p1.bin"),
        "--out", &p("p2.bin"),
    ]);

    let out = run_ok(&[
        "evaluate", "--ckpt", &p("p2.bin"), "--graph", &p("graph.bin"), "--data", &p("data"),
        "--steps", "3", "--spatial-leads", "1,3", "--out", &p("eval"),
    ]);
    assert!(out.contains("rmse@1"));
    let rmse = std::fs::read_to_string(dir.path().join("eval/rmse.csv")).unwrap();
    assert!(rmse.starts_with("variable,lead_steps,rmse,baseline_rmse\n"));
    assert!(dir.path().join("eval/spatial_loss_1.csv").exists());
    assert!(dir.path().join("eval/spatial_loss_3.csv").exists());
    assert!(dir.path().join("eval/degrees.csv").exists());

    run_ok(&[
        "forecast", "--ckpt", &p("p2.bin"), "--graph", &p("graph.bin"), "--data", &p("data"),
        "--sample", "0", "--steps", "2", "--svg", "--out", &p("fc"),
    ]);
    assert!(dir.path().join("fc/forecast_step01_c0.csv").exists());
    assert!(dir.path().join("fc/forecast_step02_v.svg").exists());
    let meta = std::fs::read_to_string(dir.path().join("fc/forecast_meta.txt")).unwrap();
    assert!(meta.contains("boundary_width=6"));
}

#[test]
fn f32_training_writes_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    run_ok(&[
        "gen-data", "--grid", "24x24", "--n-traj", "2", "--len", "15", "--seed", "9",
        "--boundary", "6", "--out", &p("data"),
    ]);
    run_ok(&[
        "build-graph", "--grid", "24x24", "--levels", "1", "--n1", "6", "--variant", "single",
        "--boundary", "6", "--out", &p("g.bin"),
    ]);
    run_ok(&[
        "train", "--graph", &p("g.bin"), "--data", &p("data"), "--variant", "single",
        "--phase", "1", "--epochs", "1", "--seed", "1", "--latent", "8",
        "--precision", "f32", "--serial", "--out", &p("ck32.bin"),
    ]);
    // the f32-trained checkpoint evaluates through the f64 pipeline
    run_ok(&[
        "evaluate", "--ckpt", &p("ck32.bin"), "--graph", &p("g.bin"), "--data", &p("data"),
        "--steps", "2", "--out", &p("eval32"),
    ]);
}

#[test]
fn contract_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();

    // bad grid syntax
    let err = run_err(&[
        "build-graph", "--grid", "nonsense", "--levels", "1", "--n1", "6", "--variant",
        "single", "--out", &p("g.bin"),
    ]);
    assert!(err.contains("WxH"), "stderr: {err}");

    // n1 not divisible by 3^(levels-1)
    run_err(&[
        "build-graph", "--grid", "30x30", "--levels", "2", "--n1", "7", "--variant",
        "multiscale", "--boundary", "5", "--out", &p("g.bin"),
    ]);

    // missing files
    run_err(&["evaluate", "--ckpt", &p("no.bin"), "--graph", &p("no.bin"), "--data", &p("no"), "--out", &p("o")]);

    // phase 2 without an init checkpoint
    run_ok(&[
        "gen-data", "--grid", "24x24", "--n-traj", "2", "--len", "15", "--seed", "3",
        "--boundary", "6", "--out", &p("d"),
    ]);
    run_ok(&[
        "build-graph", "--grid", "24x24", "--levels", "1", "--n1", "6", "--variant", "single",
        "--boundary", "6", "--out", &p("gs.bin"),
    ]);
    let err = run_err(&[
        "train", "--graph", &p("gs.bin"), "--data", &p("d"), "--variant", "single",
        "--phase", "2", "--epochs", "1", "--out", &p("c.bin"),
    ]);
    assert!(err.contains("phase 2"), "stderr: {err}");

    // variant mismatch between flag and graph file
    let err = run_err(&[
        "train", "--graph", &p("gs.bin"), "--data", &p("d"), "--variant", "hierarchical",
        "--phase", "1", "--epochs", "1", "--out", &p("c.bin"),
    ]);
    assert!(err.contains("does not match graph variant"), "stderr: {err}");

    // corrupt graph file
    std::fs::write(dir.path().join("corrupt.bin"), b"LAMCAST-CONTAINER 1\nkind=lamgraph\nend\n").unwrap();
    run_err(&[
        "train", "--graph", &p("corrupt.bin"), "--data", &p("d"), "--variant", "single",
        "--phase", "1", "--epochs", "1", "--out", &p("c.bin"),
    ]);
}

#[test]
fn graph_counts_match_between_cli_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.bin");
    run_ok(&[
        "build-graph", "--grid", "30x30", "--levels", "2", "--n1", "9", "--variant",
        "hierarchical", "--boundary", "5", "--out", &path.to_string_lossy(),
    ]);
    let g = lamcast_core_load(&path);
    assert_eq!(g.mesh_node_count(), 81 + 9);
    assert_eq!(g.mesh_edge_count(), 544 + 40 + 81 + 81);
}

fn lamcast_core_load(path: &Path) -> lamcast_core::graph::LamGraph {
    lamcast_core::graph::load_graph(path).unwrap()
}
