use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn heatdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heatdet"))
        .args(args)
        .env_remove("HEATDET_SEED")
        .output()
        .expect("spawn heatdet")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&out.stdout));
    })
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fixture_stats_total() {
    let out = heatdet(&["stats", "--fixture", "dota2dior"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["total"], 146_383);
}

#[test]
fn alpha_table_csv() {
    let out = heatdet(&["stats", "alpha", "--fixture", "dota2dior"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("class,count,alpha_prime,alpha"));
    assert_eq!(lines.count(), 11);
}

#[test]
fn dwfl_gradient_check() {
    let out = heatdet(&["grad-check", "--target", "dwfl", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert!(v["max_rel_error"].as_f64().unwrap() <= 1e-4);
    assert_eq!(v["passed"], true);
}

#[test]
fn synth_then_perfect_detections_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = heatdet(&["--seed", "3", "synth", "--num-images", "6", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let gt = data.join("dataset.json");
    assert!(data.join("manifest.json").exists());

    let ds: Value = serde_json::from_str(&fs::read_to_string(&gt).unwrap()).unwrap();
    let classes: Vec<&str> = ds["classes"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    let mut lines = String::new();
    for a in ds["annotations"].as_array().unwrap() {
        let class_id = classes.iter().position(|c| *c == a["class"]).unwrap();
        let rec = json!({ "image_id": a["image_id"], "class_id": class_id, "score": 0.9, "box": a["box"] });
        lines.push_str(&rec.to_string());
        lines.push('\n');
    }
    let dets = dir.path().join("dets.jsonl");
    fs::write(&dets, lines).unwrap();
    let csv = dir.path().join("per_class.csv");
    let out = heatdet(&[
        "evaluate", "--gt", path(&gt), "--dets", path(&dets), "--out-csv", path(&csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    for key in ["mAP", "mP", "mR", "mF1"] {
        assert_eq!(v[key], 1.0, "{key}");
    }
    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("class,AP@[0.5:0.95],AP@0.5,P,R,F1\n"));
}

#[test]
fn synth_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = heatdet(&["--seed", "11", "synth", "--num-images", "3", path(d)]);
        assert!(out.status.success());
    }
    assert_eq!(fs::read(a.join("dataset.json")).unwrap(), fs::read(b.join("dataset.json")).unwrap());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(heatdet(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(heatdet(&["tile", "--overlap", "2000", "a.json", "b.json"]).status.code(), Some(1));
    assert_eq!(heatdet(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let out = heatdet(&["stats", path(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let err: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(err["error"]["kind"], "data");
}

#[test]
fn tiling_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("big.json");
    let ds = json!({
        "classes": ["vehicle"],
        "images": [{ "id": "scene", "width": 3000, "height": 2000, "file": "scene.png" }],
        "annotations": [
            { "image_id": "scene", "class": "vehicle", "box": [10.0, 10.0, 50.0, 40.0] },
            { "image_id": "scene", "class": "vehicle", "box": [2900.0, 1900.0, 2990.0, 1990.0] }
        ]
    });
    fs::write(&input, ds.to_string()).unwrap();
    let output = dir.path().join("tiles.json");
    let out = heatdet(&["tile", path(&input), path(&output)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tiled: Value = serde_json::from_str(&fs::read_to_string(&output).unwrap()).unwrap();
    // Columns at 0, 824, 1648, 1976 and rows at 0, 824, 976.
    assert_eq!(tiled["images"].as_array().unwrap().len(), 12);
    assert_eq!(tiled["annotations"].as_array().unwrap().len(), 2);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("tiles.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "tile");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}
