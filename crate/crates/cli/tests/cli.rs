use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rtgnn::dynamics::{build_primitive_set, LatticeConfig};
use rtgnn::gnn::{GnnConfig, Rtgnn};
use rtgnn::rollout::{prediction_records, scene_graph, truth_trajectory, write_predictions, ML_LABEL};
use rtgnn::scene::{load_scenes, write_scenes};
use rtgnn::traffic::{AgentKind, RegionConfig};
use rtgnn::training::{save_checkpoint, TrainConfig, TrainState};

fn rtgnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtgnn"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("RTGNN_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn toy_checkpoint(dir: &Path) -> PathBuf {
    let model = Rtgnn::new(GnnConfig::toy()).unwrap();
    let cfg = TrainConfig::default();
    let path = dir.join("toy.ckpt");
    save_checkpoint(&path, model.config(), &cfg, &TrainState::new(model.init_parameters(0), &cfg)).unwrap();
    path
}

#[test]
fn gen_with_same_seed_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(&rtgnn(dir.path(), &["gen", "--seed", "7", "-n", "6", "--out", "a.jsonl"]));
    let b = ok(&rtgnn(dir.path(), &["gen", "--seed", "7", "-n", "6", "--out", "b.jsonl"]));
    let digest = |s: &str| s.split("sha256 ").nth(1).unwrap().trim().to_string();
    assert_eq!(digest(&a), digest(&b));
    assert_eq!(std::fs::read(dir.path().join("a.jsonl")).unwrap(), std::fs::read(dir.path().join("b.jsonl")).unwrap());
    let c = ok(&rtgnn(dir.path(), &["gen", "--seed", "8", "-n", "6", "--out", "c.jsonl"]));
    assert_ne!(digest(&a), digest(&c));
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rtgnn"))
        .args(["gen", "-n", "2", "--kinds", "intersection,lane_change"])
        .current_dir(dir.path())
        .env("RTGNN_OUT_DIR", dir.path().join("runs"))
        .output()
        .unwrap();
    ok(&out);
    let scenes = load_scenes(&dir.path().join("runs/corpus.jsonl")).unwrap();
    assert_eq!(scenes.len(), 2);
    assert_eq!(scenes[1].scenario, "lane_change");
}

#[test]
fn eval_of_the_truth_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    ok(&rtgnn(dir.path(), &["gen", "--seed", "3", "-n", "10", "--out", "scenes.jsonl"]));
    let scenes = load_scenes(&dir.path().join("scenes.jsonl")).unwrap();
    let prims = build_primitive_set(LatticeConfig::default()).unwrap();
    let mut records = Vec::new();
    for s in &scenes {
        let g = scene_graph(s, 0, &RegionConfig::default(), &prims).unwrap();
        let ids: Vec<u64> = g.nodes().iter().map(|n| n.agent.id).collect();
        let truth = truth_trajectory(s, 0, &ids, 8).unwrap();
        records.extend(prediction_records(&s.id, ML_LABEL, &truth));
        for k in 0..5 {
            records.extend(prediction_records(&s.id, &k.to_string(), &truth));
        }
    }
    let mut buf = Vec::new();
    write_predictions(&mut buf, &records).unwrap();
    std::fs::write(dir.path().join("truth.csv"), buf).unwrap();

    let table = ok(&rtgnn(
        dir.path(),
        &["eval", "--scenes", "scenes.jsonl", "--predictions", "truth.csv", "--out", "eval.csv"],
    ));
    assert!(table.contains("rtgnn_ml") && table.contains("rtgnn_min5"), "{table}");
    let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,horizon_s,ade,fde,scenes"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!((f[2], f[3]), ("0.000000", "0.000000"), "{row}");
    }

    // the baseline is not exact on curving traffic
    let with_cv = ok(&rtgnn(dir.path(), &["eval", "--scenes", "scenes.jsonl", "--predictions", "truth.csv", "--baseline"]));
    assert!(with_cv.contains("const_vel"));
}

#[test]
fn conditional_predict_without_ego_fails() {
    let dir = tempfile::tempdir().unwrap();
    ok(&rtgnn(dir.path(), &["gen", "-n", "1", "--out", "scenes.jsonl"]));
    let mut scenes = load_scenes(&dir.path().join("scenes.jsonl")).unwrap();
    for step in &mut scenes[0].steps {
        for a in &mut step.agents {
            if a.kind == AgentKind::Ego {
                a.kind = AgentKind::Vehicle;
            }
        }
    }
    let mut buf = Vec::new();
    write_scenes(&mut buf, &scenes).unwrap();
    std::fs::write(dir.path().join("no_ego.jsonl"), buf).unwrap();
    let controls: String = std::iter::once("scene_id,step,a,omega\n".to_string())
        .chain((0..8).map(|t| format!("{},{t},0.0,0.0\n", scenes[0].id)))
        .collect();
    std::fs::write(dir.path().join("plan.csv"), controls).unwrap();
    toy_checkpoint(dir.path());

    let out = rtgnn(
        dir.path(),
        &["predict", "--checkpoint", "toy.ckpt", "--scenes", "no_ego.jsonl", "--conditional", "plan.csv"],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no ego"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");

    // with the ego restored the same command succeeds
    ok(&rtgnn(
        dir.path(),
        &["predict", "--checkpoint", "toy.ckpt", "--scenes", "scenes.jsonl", "--conditional", "plan.csv", "--out", "p.csv"],
    ));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rtgnn(dir.path(), &["gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(rtgnn(dir.path(), &["eval", "--scenes", "missing.jsonl", "--baseline"]).status.code(), Some(2));
    assert_eq!(rtgnn(dir.path(), &["train"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    assert_eq!(rtgnn(dir.path(), &["--config", "bad.toml", "gen"]).status.code(), Some(2));
    assert_eq!(rtgnn(dir.path(), &["gen", "--kinds", "roundabout"]).status.code(), Some(2));
}

#[test]
fn corrupt_scene_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{\"version\":1}\n").unwrap();
    let out = rtgnn(dir.path(), &["eval", "--scenes", "bad.jsonl", "--baseline"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

fn pipeline(dir: &Path) -> (String, Vec<u8>, Vec<u8>) {
    std::fs::write(dir.join("run.toml"), "seed = 5\nmodel = \"toy\"\n[train]\nepochs = 2\nbatch_size = 4\n").unwrap();
    let c = ["--config", "run.toml"];
    let args = |rest: &[&'static str]| -> Vec<&'static str> { c.iter().copied().chain(rest.iter().copied()).collect() };
    ok(&rtgnn(dir, &args(&["gen", "-n", "8", "--out", "train.jsonl"])));
    ok(&rtgnn(dir, &args(&["gen", "-n", "4", "--seed", "6", "--out", "test.jsonl"])));
    ok(&rtgnn(dir, &args(&["train", "--corpus", "train.jsonl", "--validation", "test.jsonl", "--out", "run"])));
    ok(&rtgnn(
        dir,
        &args(&["predict", "--checkpoint", "run/best.ckpt", "--scenes", "test.jsonl", "--ml", "--samples", "5", "--out", "p.csv"]),
    ));
    let table = ok(&rtgnn(dir, &args(&["eval", "--scenes", "test.jsonl", "--predictions", "p.csv", "--baseline"])));
    ok(&rtgnn(dir, &args(&["plot", "--scenes", "test.jsonl", "--predictions", "p.csv", "--out", "scene.svg"])));
    (table, std::fs::read(dir.join("p.csv")).unwrap(), std::fs::read(dir.join("scene.svg")).unwrap())
}

#[test]
fn pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    assert!(ra.0.contains("const_vel") && ra.0.contains("rtgnn_min5"), "{}", ra.0);
    assert!(String::from_utf8_lossy(&ra.2).starts_with("<svg"));
    assert_eq!(ra, pipeline(b.path()));

    // eval straight from the checkpoint, and resume for one more epoch
    ok(&rtgnn(a.path(), &["eval", "--scenes", "test.jsonl", "--checkpoint", "run/best.ckpt", "--horizons", "2,4"]));
    let out = ok(&rtgnn(
        a.path(),
        &["train", "--corpus", "train.jsonl", "--resume", "run/epoch_002.ckpt", "--epochs", "3", "--out", "run"],
    ));
    assert!(out.starts_with("epoch 3"), "{out}");
}

#[test]
fn gradcheck_passes_on_the_toy_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&rtgnn(dir.path(), &["gradcheck", "--model", "toy", "--coords", "4"]));
    assert!(out.starts_with("max relative error"), "{out}");
}
