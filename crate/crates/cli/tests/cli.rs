use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;
use wrtsam::metrics::MetricsReport;
use wrtsam::model::{forward, Checkpoint};
use wrtsam::synth::{read_mask, read_png, write_png};
use wrtsam::tensor_core::sigmoid;
use wrtsam::train::{tile_spans, width_crop};
use wrtsam::Tensor;

fn wrtsam(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wrtsam")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = wrtsam(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tree_hash(root: &Path) -> BTreeMap<PathBuf, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, String>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let digest = Sha256::digest(fs::read(&p).unwrap());
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), digest.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// A 16-image scenario-A set, a 1-epoch pretrain and a 1-epoch adapt.
fn pipeline() -> TempDir {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["synth", "--preset", "scenario-a", "--count", "16", "--out", "a"]);
    ok(d, &["pretrain", "--data", "a", "--out", "pre", "--epochs", "1"]);
    ok(d, &["adapt", "--checkpoint", "pre/checkpoint.wrt", "--data", "a", "--out", "ad", "--epochs", "1"]);
    t
}

#[test]
fn synth_writes_pairs_and_rejects_unknown_presets() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["synth", "--preset", "scenario-a", "--count", "10", "--out", "a"]);
    assert_eq!(fs::read_dir(d.join("a/images")).unwrap().count(), 10);
    assert_eq!(fs::read_dir(d.join("a/masks")).unwrap().count(), 10);
    assert!(d.join("a/manifest.json").is_file());
    let out = wrtsam(d, &["synth", "--preset", "scenario-q", "--count", "1", "--out", "q"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for p in wrtsam::synth::PRESETS {
        assert!(err.contains(p), "{err}");
    }
}

#[test]
fn end_to_end_reports_every_field() {
    let t = pipeline();
    let d = t.path();
    ok(d, &["eval", "--checkpoint", "ad/checkpoint.wrt", "--data", "a", "--out", "ev"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    for key in ["threshold", "images", "counts", "precision", "recall", "iou", "auc", "macro"] {
        assert!(!report[key].is_null(), "missing {key}");
    }
    assert_eq!(report["images"], 16);
    let csv = fs::read_to_string(d.join("ev/pr_curve.csv")).unwrap();
    assert!(csv.starts_with("recall,precision\n"));
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ad/result.json")).unwrap()).unwrap();
    assert_eq!(result["epoch_losses"].as_array().unwrap().len(), 1);
    assert_eq!(result["evaluations"][0]["dataset"], "holdout");
    assert!(result.get("wall_clock_secs").is_none());
}

#[test]
fn ground_truth_as_prediction_scores_one() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["synth", "--preset", "scenario-b", "--count", "6", "--out", "b"]);
    ok(d, &["eval", "--predictions", "b/masks", "--data", "b", "--out", "ev"]);
    let r: MetricsReport = serde_json::from_str(&fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!((r.precision.get(), r.recall.get(), r.iou.get(), r.auc.get()), (Some(1.0), Some(1.0), Some(1.0), Some(1.0)));
}

#[test]
fn missing_inputs_name_the_path() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let out = wrtsam(d, &["pretrain", "--data", "nowhere", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    let out = wrtsam(d, &["eval", "--checkpoint", "gone.wrt", "--data", "nowhere", "--out", "x"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("gone.wrt"));
}

#[test]
fn usage_and_config_errors_exit_one() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    assert_eq!(wrtsam(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(wrtsam(d, &["pretrain", "--data", "a", "--out", "x", "--mspg", "yes"]).status.code(), Some(1));
    assert_eq!(wrtsam(d, &["pretrain", "--data", "a", "--out", "x", "--dct-mode", "mid3"]).status.code(), Some(1));
    fs::write(d.join("bad.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = wrtsam(d, &["--config", "bad.toml", "pretrain", "--data", "a", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    fs::write(d.join("inverted.toml"), "[train]\nlr0 = 1e-8\n").unwrap();
    assert_eq!(wrtsam(d, &["--config", "inverted.toml", "pretrain", "--data", "a", "--out", "x"]).status.code(), Some(1));
    assert_eq!(wrtsam(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn adapting_with_everything_off_fails() {
    let t = pipeline();
    let out = wrtsam(
        t.path(),
        &[
            "adapt",
            "--checkpoint",
            "pre/checkpoint.wrt",
            "--data",
            "a",
            "--out",
            "off",
            "--fpg",
            "off",
            "--mspg",
            "off",
            "--adapters",
            "off",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing to train"));
}

#[test]
fn predict_writes_binary_masks_and_mirrors_directories() {
    let t = pipeline();
    let d = t.path();
    fs::create_dir_all(d.join("nested/deeper")).unwrap();
    fs::copy(d.join("a/images/00000.png"), d.join("nested/top.png")).unwrap();
    fs::copy(d.join("a/images/00001.png"), d.join("nested/deeper/inner.png")).unwrap();
    ok(d, &["predict", "--checkpoint", "ad/checkpoint.wrt", "--input", "nested", "--out", "p", "--probabilities"]);
    for rel in ["top.png", "deeper/inner.png"] {
        let m = read_png(&d.join("p/masks").join(rel)).unwrap();
        assert_eq!(m.shape(), [1, 1, 64, 64]);
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(d.join("p/probabilities").join(rel).is_file());
    }
    ok(d, &["predict", "--checkpoint", "ad/checkpoint.wrt", "--input", "a", "--out", "q"]);
    let entries: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("q/predictions.json")).unwrap()).unwrap();
    assert_eq!(entries.as_array().unwrap().len(), 16);
    assert!(!entries[0]["metrics"]["iou"].is_null());
}

#[test]
fn wide_predictions_stitch_tiles_by_maximum() {
    let t = pipeline();
    let d = t.path();
    let image = Tensor::from_fn([1, 1, 64, 1600], |_, _, h, w| (((h * 7 + w * 3) % 23) as f64 / 22.0 * 255.0).round() / 255.0);
    write_png(&d.join("wide.png"), &image).unwrap();
    ok(d, &["predict", "--checkpoint", "ad/checkpoint.wrt", "--input", "wide.png", "--out", "w", "--width-crop", "640", "--probabilities"]);
    let mask = read_png(&d.join("w/masks/wide.png")).unwrap();
    assert_eq!(mask.shape(), [1, 1, 64, 1600]);

    let ck = Checkpoint::load(&d.join("ad/checkpoint.wrt")).unwrap();
    let spans = tile_spans(1600, 640).unwrap();
    assert_eq!(spans.iter().map(|s| s.offset).collect::<Vec<_>>(), [0, 640, 960]);
    let logits: Vec<Tensor> = width_crop(&image, 640).unwrap().iter().map(|t| forward(&t.image, &ck.state, &ck.config).unwrap()).collect();
    for x in [0, 639, 640, 959, 960, 1279, 1280, 1599] {
        for y in [0, 31, 63] {
            let mut best = f64::NEG_INFINITY;
            for (s, l) in spans.iter().zip(&logits) {
                if (s.offset..s.offset + 640).contains(&x) {
                    best = best.max(l.at(0, 0, y, x - s.offset));
                }
            }
            let expect = if sigmoid(best) >= 0.5 { 1.0 } else { 0.0 };
            assert_eq!(mask.at(0, 0, y, x), expect, "pixel ({y}, {x})");
        }
    }
}

#[test]
fn gradcheck_passes_and_detects_a_corrupted_rule() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let table = ok(d, &["gradcheck", "--out", "g"]);
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(d.join("g/gradcheck.json")).unwrap()).unwrap();
    let names: std::collections::BTreeSet<&str> = rows.iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names.len(), rows.len());
    for op in ["conv2d_depthwise", "layer_norm", "self_attention", "patch_dct", "fpg", "mspg", "iou_loss"] {
        assert_eq!(table.lines().filter(|l| l.split_whitespace().next() == Some(op)).count(), 1, "{op}");
    }
    assert!(rows.iter().all(|r| r["passed"] == true));
    let out = wrtsam(d, &["gradcheck", "--corrupt", "patchdct"]);
    assert_eq!(out.status.code(), Some(2));
    let table = String::from_utf8(out.stdout).unwrap();
    let row = table.lines().find(|l| l.starts_with("patch_dct ")).unwrap();
    assert!(row.ends_with("FAIL"), "{row}");
    let row = table.lines().find(|l| l.starts_with("conv2d_dense ")).unwrap();
    assert!(row.ends_with("pass"), "{row}");
}

/// Every subcommand, run twice into fresh directories, writes identical bytes.
#[test]
fn every_subcommand_reruns_byte_identically() {
    let runs: Vec<BTreeMap<PathBuf, String>> = (0..2)
        .map(|_| {
            let t = pipeline();
            let d = t.path();
            ok(d, &["synth", "--preset", "scenario-c", "--count", "4", "--out", "c"]);
            ok(d, &["eval", "--checkpoint", "ad/checkpoint.wrt", "--data", "c", "--out", "ev"]);
            ok(d, &["predict", "--checkpoint", "ad/checkpoint.wrt", "--input", "c", "--out", "pr", "--probabilities"]);
            ok(
                d,
                &[
                    "ablate",
                    "--checkpoint",
                    "pre/checkpoint.wrt",
                    "--data",
                    "a",
                    "--eval",
                    "C=c",
                    "--rows",
                    "adapter-only,full",
                    "--seeds",
                    "3",
                    "--epochs",
                    "1",
                    "--out",
                    "ab",
                ],
            );
            ok(d, &["gradcheck", "--out", "gc"]);
            tree_hash(d)
        })
        .collect();
    for dir in ["a/", "pre/", "ad/", "c/", "ev/", "pr/", "ab/", "gc/"] {
        assert!(runs[0].keys().any(|k| k.to_str().unwrap().starts_with(dir)), "nothing written under {dir}");
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn sequential_and_parallel_paths_agree() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["synth", "--preset", "scenario-a", "--count", "8", "--out", "a"]);
    ok(d, &["pretrain", "--data", "a", "--out", "par", "--epochs", "1"]);
    ok(d, &["--sequential", "pretrain", "--data", "a", "--out", "seq", "--epochs", "1"]);
    assert_eq!(fs::read(d.join("par/checkpoint.wrt")).unwrap(), fs::read(d.join("seq/checkpoint.wrt")).unwrap());
    let m = read_mask(&d.join("a/masks/00000.png")).unwrap();
    assert_eq!(m.shape(), [1, 1, 64, 64]);
}
