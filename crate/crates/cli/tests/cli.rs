//! End-to-end runs of the `bonet` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bonet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bonet"))
        .args(args)
        .env("BONET_LOG", "warn")
        .output()
        .expect("run bonet")
}

fn ok(args: &[&str]) -> String {
    let out = bonet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("train.json");
    fs::write(
        &path,
        r#"{
  "model": {"backbone_hidden": [8, 16], "k": 16, "h_max": 8, "box_hidden": [16, 16],
            "mask_compress": 8, "mask_fused": 8, "mask_hidden": [8, 4], "sem_hidden": 8,
            "semantic_classes": 4},
  "train": {"blocking": {"block_size": 2.0, "stride": 2.0, "train_points": 64}}
}"#,
    )
    .unwrap();
    path
}

fn generate(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&["gen", "--out", p(&data), "--seed", "4", "--train-scenes", "5", "--test-scenes", "2"]);
    data
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        ok(&["gen", "--out", p(d), "--seed", "4", "--train-scenes", "2", "--test-scenes", "1"]);
    }
    for name in ["dataset.json", "scene_00000.json", "scene_00002.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let runs = fs::read_to_string(a.join("runs.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(runs.lines().next().unwrap()).unwrap();
    assert_eq!(record["command"], "gen");
    assert_eq!(record["seed"], 4);
}

#[test]
fn invalid_generator_config_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    fs::write(&cfg, r#"{"gen": {"instances_min": 5, "instances_max": 2}}"#).unwrap();
    let out = bonet(&["gen", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    fs::write(&cfg, r#"{"gen": {"no_such_field": 1}}"#).unwrap();
    let out = bonet(&["gen", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = bonet(&["train", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1), "missing required flag");
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    ok(&[
        "train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run), "--epochs", "2",
        "--seed", "1", "--grad-mode", "straight-through",
    ]);
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    for line in history.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["l_sem", "l_bbox", "l_bbs", "l_pmask", "l_all"] {
            assert!(rec["losses"][key].as_f64().unwrap().is_finite());
        }
    }
    let runs = fs::read_to_string(run.join("runs.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(runs.lines().last().unwrap()).unwrap();
    assert_eq!(record["command"], "train");
    assert_eq!(record["config"]["train"]["loss"]["gradient_mode"]["mode"], "straight_through");
    assert_eq!(record["config"]["train"]["seed"], 1);

    // Resuming with a larger budget adds exactly the missing epochs.
    let ckpt = run.join("checkpoint.bin");
    ok(&["train", "--data", p(&data), "--resume", p(&ckpt), "--out", p(&run), "--epochs", "3"]);
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let ev = dir.path().join("ev");
    let first = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&ev)]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    for key in ["mean_ap", "mprec", "mrec"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    let csv = fs::read_to_string(ev.join("scenes.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let again = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&ev)]);
    assert_eq!(first, again);
    ok(&[
        "eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&ev), "--split", "train",
        "--score-thresh", "0.2", "--mask-thresh", "0.4",
    ]);

    // A model section that disagrees with the checkpoint is rejected.
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"model": {"h_max": 4}}"#).unwrap();
    let out = bonet(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--config", p(&bad), "--out", p(&ev)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = bonet(&["eval", "--checkpoint", p(&bad), "--data", p(&data), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let out = ok(&["gradcheck", "--instances", "3"]);
    for name in ["l_sem", "l_bbox", "l_bbs", "l_pmask", "l_all"] {
        let row = out.lines().find(|l| l.starts_with(name)).unwrap();
        assert!(row.ends_with("pass"), "{row}");
    }
    let out = bonet(&["gradcheck", "--instances", "3", "--corrupt-gradient"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn assign_prints_the_optimal_pairing() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let scene_path = data.join("scene_00000.json");
    let scene: serde_json::Value = serde_json::from_str(&fs::read_to_string(&scene_path).unwrap()).unwrap();
    let gts: Vec<serde_json::Value> = scene["instances"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["bbox"].clone())
        .collect();
    let t = gts.len();
    assert!(t >= 1);

    let run = |boxes: &[serde_json::Value]| -> serde_json::Value {
        let path = dir.path().join("boxes.json");
        fs::write(&path, serde_json::to_string(boxes).unwrap()).unwrap();
        serde_json::from_str(&ok(&["assign", "--scene", p(&scene_path), "--boxes", p(&path), "--json"])).unwrap()
    };
    let identity = run(&gts);
    let pairing: Vec<u64> = identity["gt_to_pred"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(pairing, (0..t as u64).collect::<Vec<_>>());
    for j in 0..t {
        assert_eq!(identity["ed"][j][j].as_f64().unwrap(), 0.0);
    }

    let mut reversed = gts.clone();
    reversed.reverse();
    let shuffled = run(&reversed);
    let pairing: Vec<u64> = shuffled["gt_to_pred"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(pairing, (0..t as u64).rev().collect::<Vec<_>>());
    let (a, b) = (identity["total_cost"].as_f64().unwrap(), shuffled["total_cost"].as_f64().unwrap());
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");

    let table = {
        let path = dir.path().join("boxes.json");
        fs::write(&path, serde_json::to_string(&gts).unwrap()).unwrap();
        ok(&["assign", "--scene", p(&scene_path), "--boxes", p(&path)])
    };
    assert!(table.contains("total cost"));

    // Fewer predictions than instances.
    let many = generate_scene_with_instances(&data);
    let path = dir.path().join("one.json");
    fs::write(&path, serde_json::to_string(&vec![gts[0].clone()]).unwrap()).unwrap();
    let out = bonet(&["assign", "--scene", p(&many), "--boxes", p(&path)]);
    assert_eq!(out.status.code(), Some(1));
}

/// A scene from the dataset with at least two instances.
fn generate_scene_with_instances(data: &Path) -> std::path::PathBuf {
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("dataset.json")).unwrap()).unwrap();
    let entry = manifest["scenes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["instances"].as_u64().unwrap() >= 2)
        .expect("a scene with two instances");
    data.join(entry["file"].as_str().unwrap())
}
