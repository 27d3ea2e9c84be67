//! End-to-end tests over the `pcr` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pcr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pcr"))
}

fn run(args: &[&str]) -> Output {
    pcr().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Workspace {
    root: PathBuf,
}

impl Workspace {
    fn new(tag: &str) -> Self {
        let root = std::env::temp_dir().join(format!("pcr-cli-{tag}-{}", std::process::id()));
        fs::remove_dir_all(&root).ok();
        fs::create_dir_all(&root).unwrap();
        Workspace { root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    fn write(&self, rel: &str, contents: &str) {
        fs::write(self.path(rel), contents).unwrap();
    }

    /// Synthesizes the toy corpus and writes a matching run config.
    fn with_toy_data(tag: &str, steps: usize, lr: f64) -> Self {
        let ws = Workspace::new(tag);
        let out = run(&[
            "tools",
            "synth",
            "--out",
            &ws.s("data"),
            "--count",
            "6",
            "--joints",
            "4",
            "--seed",
            "7",
            "--with-detections",
        ]);
        assert_ok(&out);
        ws.write(
            "toy.cfg",
            &format!(
                "k = 3\nl = 2\nchannels = 16,16,16\njoints = 4\n\
                 input_h = 64\ninput_w = 48\naux = true\nseed = 7\n\
                 lr = {lr}\nsteps = {steps}\n"
            ),
        );
        ws
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        fs::remove_dir_all(&self.root).ok();
    }
}

fn train_into(ws: &Workspace, out: &str) {
    let output = run(&[
        "train",
        "--config",
        &ws.s("toy.cfg"),
        "--annotations",
        &ws.s("data/annotations.json"),
        "--images",
        &ws.s("data/images"),
        "--out",
        &ws.s(out),
    ]);
    assert_ok(&output);
}

#[test]
fn training_is_deterministic_given_the_seed() {
    let ws = Workspace::with_toy_data("det", 12, 0.1);
    train_into(&ws, "run_a");
    train_into(&ws, "run_b");
    let a = fs::read_to_string(ws.path("run_a/loss_log.csv")).unwrap();
    let b = fs::read_to_string(ws.path("run_b/loss_log.csv")).unwrap();
    assert_eq!(a, b, "loss logs differ across identical runs");
    assert!(a.lines().count() == 13, "header plus one row per step");
}

#[test]
fn zero_learning_rate_flattens_the_loss_log() {
    let ws = Workspace::with_toy_data("flat", 8, 0.0);
    train_into(&ws, "run");
    let log = fs::read_to_string(ws.path("run/loss_log.csv")).unwrap();
    let losses: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(losses.len(), 8);
    assert!(
        losses.iter().all(|&l| l == losses[0]),
        "loss moved under lr = 0: {losses:?}"
    );
}

#[test]
fn infer_on_an_empty_detection_file_writes_an_empty_array() {
    let ws = Workspace::with_toy_data("empty", 2, 0.1);
    train_into(&ws, "run");
    ws.write("none.json", "[]");
    let out = run(&[
        "infer",
        "--checkpoint",
        &ws.s("run"),
        "--detections",
        &ws.s("none.json"),
        "--images",
        &ws.s("data/images"),
        "--out",
        &ws.s("results.json"),
    ]);
    assert_ok(&out);
    let results: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("results.json")).unwrap()).unwrap();
    assert_eq!(results.as_array().unwrap().len(), 0);
}

#[test]
fn infer_output_validates_against_the_results_schema() {
    let ws = Workspace::with_toy_data("schema", 40, 0.1);
    train_into(&ws, "run");
    // Person boxes from the annotations double as detections.
    boxes_as_detections(&ws.path("data/annotations.json"), &ws.path("person_dets.json"));
    let out = run(&[
        "infer",
        "--checkpoint",
        &ws.s("run"),
        "--detections",
        &ws.s("person_dets.json"),
        "--images",
        &ws.s("data/images"),
        "--out",
        &ws.s("results.json"),
    ]);
    assert_ok(&out);
    let text = fs::read_to_string(ws.path("results.json")).unwrap();
    let parsed: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed.len(), 6);
    for row in &parsed {
        assert!(row.get("image_id").is_some());
        assert!(row.get("score").is_some());
        let kps = row.get("keypoints").unwrap().as_array().unwrap();
        assert_eq!(kps.len(), 3 * 4);
    }
}

#[test]
fn eval_scores_ground_truth_against_itself_at_one() {
    let ws = Workspace::with_toy_data("evalgt", 2, 0.1);
    // Results straight from the ground truth.
    let ann: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("data/annotations.json")).unwrap()).unwrap();
    let results: Vec<serde_json::Value> = ann["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| {
            let kps: Vec<f64> = a["keypoints"]
                .as_array()
                .unwrap()
                .chunks(3)
                .flat_map(|t| {
                    vec![
                        t[0].as_f64().unwrap(),
                        t[1].as_f64().unwrap(),
                        1.0, // score slot
                    ]
                })
                .collect();
            serde_json::json!({
                "image_id": a["image_id"],
                "keypoints": kps,
                "score": 1.0
            })
        })
        .collect();
    ws.write("results.json", &serde_json::to_string(&results).unwrap());

    let out = run(&[
        "eval",
        "--results",
        &ws.s("results.json"),
        "--gt",
        &ws.s("data/annotations.json"),
        "--json",
        &ws.s("metrics.json"),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("1.000"), "stdout was: {stdout}");
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["ap"].as_f64().unwrap(), 1.0);
    assert_eq!(metrics["ar"].as_f64().unwrap(), 1.0);

    // Empty results score zero.
    ws.write("none.json", "[]");
    let out = run(&[
        "eval",
        "--results",
        &ws.s("none.json"),
        "--gt",
        &ws.s("data/annotations.json"),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0.000"), "stdout was: {stdout}");
}

#[test]
fn nms_with_threshold_one_keeps_everything() {
    let ws = Workspace::new("nms");
    // Two identical poses in one image plus one in another.
    let results = serde_json::json!([
        {"image_id": 1, "score": 0.9, "keypoints": [10.0, 10.0, 1.0, 20.0, 20.0, 1.0]},
        {"image_id": 1, "score": 0.8, "keypoints": [10.0, 10.0, 1.0, 20.0, 20.0, 1.0]},
        {"image_id": 2, "score": 0.7, "keypoints": [10.0, 10.0, 1.0, 20.0, 20.0, 1.0]}
    ]);
    ws.write("results.json", &results.to_string());
    let out = run(&[
        "tools", "nms",
        "--results", &ws.s("results.json"),
        "--threshold", "1.0",
        "--out", &ws.s("kept.json"),
    ]);
    assert_ok(&out);
    let kept: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(ws.path("kept.json")).unwrap()).unwrap();
    assert_eq!(kept.len(), 3, "OKS <= 1 always, so threshold 1.0 keeps all");

    // A sub-1.0 threshold collapses the same-image duplicates only.
    let out = run(&[
        "tools", "nms",
        "--results", &ws.s("results.json"),
        "--threshold", "0.9",
        "--out", &ws.s("kept2.json"),
    ]);
    assert_ok(&out);
    let kept: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(ws.path("kept2.json")).unwrap()).unwrap();
    assert_eq!(kept.len(), 2);
}

#[test]
fn pseudo_tool_keeps_exactly_the_strictly_above_threshold_joints() {
    let ws = Workspace::new("pseudo");
    let results = serde_json::json!([
        {"image_id": 1, "score": 0.9,
         "keypoints": [1.0, 1.0, 0.95, 2.0, 2.0, 0.90, 3.0, 3.0, 0.91]},
        {"image_id": 2, "score": 0.9,
         "keypoints": [1.0, 1.0, 0.10, 2.0, 2.0, 0.89, 3.0, 3.0, 0.90]}
    ]);
    ws.write("results.json", &results.to_string());
    let out = run(&[
        "tools", "pseudo",
        "--results", &ws.s("results.json"),
        "--thr", "0.9",
        "--out", &ws.s("pseudo.json"),
    ]);
    assert_ok(&out);
    let ann: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("pseudo.json")).unwrap()).unwrap();
    let instances = ann["annotations"].as_array().unwrap();
    assert_eq!(instances.len(), 1, "the all-at-or-below instance is dropped");
    let kps = instances[0]["keypoints"].as_array().unwrap();
    let flags: Vec<i64> = kps.chunks(3).map(|t| t[2].as_f64().unwrap() as i64).collect();
    assert_eq!(flags, vec![2, 0, 2]);
}

#[test]
fn merge_tool_applies_the_default_limb_map() {
    let ws = Workspace::new("merge");
    let primary = serde_json::json!({
        "images": [], "annotations": [], "categories": []
    });
    ws.write("primary.json", &primary.to_string());
    let triplets: Vec<f64> = (0..14).flat_map(|j| vec![j as f64, j as f64, 2.0]).collect();
    let external = serde_json::json!({
        "images": [{"id": 5, "file_name": "5.pgm", "width": 100, "height": 100}],
        "annotations": [{
            "id": 1, "image_id": 5, "bbox": [0.0, 0.0, 50.0, 50.0],
            "keypoints": triplets
        }]
    });
    ws.write("external.json", &external.to_string());
    let out = run(&[
        "tools", "merge",
        "--primary", &ws.s("primary.json"),
        "--external", &ws.s("external.json"),
        "--out", &ws.s("merged.json"),
    ]);
    assert_ok(&out);
    let merged: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("merged.json")).unwrap()).unwrap();
    let ann = &merged["annotations"].as_array().unwrap()[0];
    assert_eq!(ann["num_keypoints"].as_i64().unwrap(), 12);
    assert_eq!(ann["keypoints"].as_array().unwrap().len(), 17 * 3);
}

#[test]
fn encode_then_decode_round_trips_through_containers() {
    let ws = Workspace::with_toy_data("codec", 2, 0.1);
    let out = run(&[
        "tools", "encode",
        "--annotations", &ws.s("data/annotations.json"),
        "--config", &ws.s("toy.cfg"),
        "--out", &ws.s("hm"),
    ]);
    assert_ok(&out);
    assert!(ws.path("hm/inst0000.maps.tsr").exists());
    assert!(ws.path("hm/inst0000.weights.tsr").exists());

    let out = run(&[
        "tools", "decode",
        "--heatmaps", &ws.s("hm"),
        "--boxes", &ws.s("data/annotations.json"),
        "--config", &ws.s("toy.cfg"),
        "--out", &ws.s("decoded.json"),
    ]);
    assert_ok(&out);

    // Decoded joints coincide with the annotations.
    let ann: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("data/annotations.json")).unwrap()).unwrap();
    let decoded: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(ws.path("decoded.json")).unwrap()).unwrap();
    for (a, d) in ann["annotations"].as_array().unwrap().iter().zip(&decoded) {
        let want: Vec<f64> = a["keypoints"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        let got: Vec<f64> = d["keypoints"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        for j in 0..want.len() / 3 {
            let dx = got[3 * j] - want[3 * j];
            let dy = got[3 * j + 1] - want[3 * j + 1];
            assert!(
                (dx * dx + dy * dy).sqrt() < 1e-6,
                "joint {j} drifted: {got:?} vs {want:?}"
            );
        }
    }
}

#[test]
fn gradcheck_tool_exits_zero_on_the_default_configuration() {
    let out = run(&["tools", "gradcheck"]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("micro_model"));
    assert!(stdout.contains("all 29 checks passed"), "stdout was: {stdout}");
}

#[test]
fn exit_codes_distinguish_config_and_data_failures() {
    let ws = Workspace::new("exit");
    // Unknown key: configuration error, exit 2.
    ws.write("bad.cfg", "optimizer = adam\n");
    let out = run(&["train", "--config", &ws.s("bad.cfg")]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // Valid config, missing annotation path: data/config error before work.
    ws.write("ok.cfg", "joints = 4\nchannels = 16,16,16\ninput_h = 64\ninput_w = 48\n");
    let out = run(&[
        "train",
        "--config", &ws.s("ok.cfg"),
        "--annotations", &ws.s("nope.json"),
        "--images", &ws.s("data"),
        "--out", &ws.s("out"),
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // Malformed JSON: data error, exit 3.
    fs::create_dir_all(ws.path("imgs")).unwrap();
    ws.write("broken.json", "{not json");
    let out = run(&[
        "train",
        "--config", &ws.s("ok.cfg"),
        "--annotations", &ws.s("broken.json"),
        "--images", &ws.s("imgs"),
        "--out", &ws.s("out"),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

/// Rewrites annotation boxes as a detection file.
fn boxes_as_detections(annotations: &Path, out: &Path) {
    let ann: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(annotations).unwrap()).unwrap();
    let dets: Vec<serde_json::Value> = ann["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| {
            serde_json::json!({
                "image_id": a["image_id"],
                "bbox": a["bbox"],
                "score": 0.99
            })
        })
        .collect();
    fs::write(out, serde_json::to_string(&dets).unwrap()).unwrap();
}
