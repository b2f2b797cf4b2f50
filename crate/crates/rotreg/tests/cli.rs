use std::fs;
use std::path::Path;
use std::process::Command;

use rotreg::formats::{self, read_checkpoint, read_csv_rows, read_manifest, read_report, LOG_TAG};
use rotreg_core::eval::OcclusionBin;

const TINY: &str = r#"
[model]
point_mlp_dims = [8, 8]
global_feature_dim = 16
head_dims = [8, 3]
num_points = 32
k = 4

[train]
batch_size = 4
iterations = 6
check_every = 3
check_samples = 8
"#;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn rotreg(dir: &Path, args: &[&str]) -> Out {
    let out = Command::new(env!("CARGO_BIN_EXE_rotreg")).current_dir(dir).args(args).output().unwrap();
    Out {
        code: out.status.code().unwrap(),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> Out {
    let o = rotreg(dir, args);
    assert_eq!(o.code, 0, "rotreg {args:?} failed: {}", o.stderr);
    o
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), format!("{TINY}\n{extra}")).unwrap();
    dir
}

const SMALL_DATA: &str = "[data]\nseed = 5\ntrain = { low = 6, moderate = 2 }\ntest = { low = 3, moderate = 3 }\n";

#[test]
fn generate_is_byte_identical_across_runs() {
    let a = setup(SMALL_DATA);
    let b = setup(SMALL_DATA);
    ok(a.path(), &["--config", "run.toml", "generate"]);
    ok(b.path(), &["--config", "run.toml", "generate"]);
    let read = |d: &Path, f: &str| fs::read(d.join("data").join(f)).unwrap();
    assert_eq!(read(a.path(), "manifest.csv"), read(b.path(), "manifest.csv"));
    assert_eq!(read(a.path(), "points/test-00002.txt"), read(b.path(), "points/test-00002.txt"));
    assert_eq!(read(a.path(), "object.txt"), read(b.path(), "object.txt"));
    // a different seed gives a different dataset
    ok(b.path(), &["--config", "run.toml", "--seed", "6", "generate"]);
    assert_ne!(read(a.path(), "manifest.csv"), read(b.path(), "manifest.csv"));
}

#[test]
fn generated_bins_respect_the_boundary() {
    let d = setup("[data]\ntrain = { low = 10, moderate = 10 }\n");
    ok(d.path(), &["--config", "run.toml", "generate"]);
    let m = read_manifest(&d.path().join("data/manifest.csv")).unwrap();
    assert_eq!(m.rows.len(), 20);
    let low = m.rows.iter().filter(|r| r.bin == OcclusionBin::Low).count();
    assert_eq!(low, 10);
    for r in &m.rows {
        let o = (r.total - r.visible) as f64 / r.total as f64;
        assert_eq!(o, r.occlusion_factor);
        match r.bin {
            OcclusionBin::Low => assert!(o < 0.2, "{o}"),
            OcclusionBin::Moderate => assert!((0.2..=0.4).contains(&o), "{o}"),
        }
        let pts = formats::read_points(&d.path().join("data").join(&r.file)).unwrap();
        assert_eq!(pts.len(), r.visible);
    }
    assert!(m.header["config_sha256"].len() == 64);
}

#[test]
fn zero_samples_give_an_empty_manifest() {
    let d = setup("");
    let o = rotreg(d.path(), &["--config", "run.toml", "--out", "empty", "generate"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let m = read_manifest(&d.path().join("empty/manifest.csv")).unwrap();
    assert!(m.rows.is_empty());
}

#[test]
fn error_classes_and_exit_codes() {
    let d = setup("[data]\nlearning_rate = 0.1\n");
    let o = rotreg(d.path(), &["--config", "run.toml", "generate"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.starts_with("error[config]"), "{}", o.stderr);
    assert!(o.stderr.contains("learning_rate"), "{}", o.stderr);

    let d = setup("");
    let o = rotreg(d.path(), &["--config", "missing.toml", "generate"]);
    assert_eq!(o.code, 3);
    assert!(o.stderr.starts_with("error[io]"));

    let o = rotreg(d.path(), &["--config", "run.toml", "train"]);
    assert_eq!(o.code, 3, "{}", o.stderr);

    fs::create_dir_all(d.path().join("data")).unwrap();
    fs::write(d.path().join("data/manifest.csv"), "id,split\n").unwrap();
    let o = rotreg(d.path(), &["--config", "run.toml", "train"]);
    assert_eq!(o.code, 4, "{}", o.stderr);
    assert!(o.stderr.starts_with("error[format]"));

    let o = rotreg(d.path(), &["frobnicate"]);
    assert_eq!(o.code, 2);
    let o = rotreg(d.path(), &["--seed", "1", "report", "x.json"]);
    assert_eq!(o.code, 2);
}

#[test]
fn channel_mismatch_is_reported() {
    let d = setup(SMALL_DATA);
    let colour = fs::read_to_string(d.path().join("run.toml")).unwrap().replace("[model]\n", "[model]\nchannel_mode = \"xyzrgb\"\n");
    fs::write(d.path().join("rgb.toml"), colour).unwrap();
    ok(d.path(), &["--config", "run.toml", "generate"]);
    let o = rotreg(d.path(), &["--config", "rgb.toml", "train"]);
    assert_eq!(o.code, 5, "{}", o.stderr);
    assert!(o.stderr.starts_with("error[mismatch]"));
}

fn log_losses(path: &Path) -> Vec<(u64, f64)> {
    read_csv_rows(path, LOG_TAG).unwrap().iter().map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap())).collect()
}

#[test]
fn training_log_and_resume() {
    let d = setup(SMALL_DATA);
    ok(d.path(), &["--config", "run.toml", "generate"]);
    ok(d.path(), &["--config", "run.toml", "--out", "full", "train"]);
    let full = log_losses(&d.path().join("full/train-log.csv"));
    assert_eq!(full.iter().map(|r| r.0).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());

    // three iterations, then resume to six
    let short = fs::read_to_string(d.path().join("run.toml")).unwrap().replace("iterations = 6", "iterations = 3");
    fs::write(d.path().join("short.toml"), short).unwrap();
    ok(d.path(), &["--config", "short.toml", "--out", "split", "train"]);
    ok(d.path(), &["--config", "run.toml", "--out", "split", "train", "--resume", "split/checkpoint-final.json"]);
    let resumed = log_losses(&d.path().join("split/train-log.csv"));
    assert_eq!(resumed.len(), 6);
    for (a, b) in full.iter().zip(&resumed) {
        assert_eq!(a.0, b.0);
        assert!((a.1 - b.1).abs() < 1e-9, "{a:?} vs {b:?}");
    }
    let a = read_checkpoint(&d.path().join("full/checkpoint-final.json")).unwrap();
    let b = read_checkpoint(&d.path().join("split/checkpoint-final.json")).unwrap();
    assert_eq!(a.trainer, b.trainer);

    // resuming from an earlier checkpoint rewrites the tail of the log
    ok(d.path(), &["--config", "run.toml", "--out", "split", "train", "--resume", "full/checkpoint-best.json"]);
    let again = log_losses(&d.path().join("split/train-log.csv"));
    assert_eq!(again.iter().map(|r| r.0).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());

    // a checkpoint from other settings is refused
    let other = fs::read_to_string(d.path().join("run.toml")).unwrap().replace("batch_size = 4", "batch_size = 5");
    fs::write(d.path().join("other.toml"), other).unwrap();
    let o = rotreg(d.path(), &["--config", "other.toml", "--out", "x", "train", "--resume", "full/checkpoint-final.json"]);
    assert_eq!(o.code, 5, "{}", o.stderr);
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let d = setup(&format!("{SMALL_DATA}\n[eval]\npredictor = \"ground-truth\"\nadd_threshold = 0.01\n"));
    ok(d.path(), &["--config", "run.toml", "generate"]);
    let o = ok(d.path(), &["--config", "run.toml", "eval"]);
    assert!(o.stdout.contains("ground-truth"));
    let r = read_report(&d.path().join("eval/report.json")).unwrap();
    assert_eq!(r.report.records.len(), 6);
    assert!(r.report.records.iter().all(|x| x.angle_error == 0.0 && x.add == Some(0.0)));
    assert!(r.report.accuracy_curve.iter().all(|p| p.fraction == 1.0));
    assert_eq!(r.report.add_accuracy, Some(1.0));
    let curve = formats::read_curve(&d.path().join("eval/curve.csv")).unwrap();
    assert_eq!(curve.len(), 180);
    assert!(curve.iter().all(|&(_, f)| f == 1.0));
}

#[test]
fn eval_bins_match_manifest_and_reruns_are_identical() {
    let d = setup(SMALL_DATA);
    ok(d.path(), &["--config", "run.toml", "generate"]);
    ok(d.path(), &["--config", "run.toml", "train"]);
    ok(d.path(), &["--config", "run.toml", "--out", "e1", "eval"]);
    let first = fs::read(d.path().join("e1/report.json")).unwrap();
    ok(d.path(), &["--config", "run.toml", "--out", "e1", "eval"]);
    assert_eq!(first, fs::read(d.path().join("e1/report.json")).unwrap());
    ok(d.path(), &["--config", "run.toml", "--out", "e1b", "eval"]);
    let with_workers = fs::read_to_string(d.path().join("run.toml")).unwrap() + "\n[eval]\nworkers = 3\n";
    fs::write(d.path().join("w.toml"), with_workers).unwrap();
    ok(d.path(), &["--config", "w.toml", "--out", "e3", "eval"]);

    let m = read_manifest(&d.path().join("data/manifest.csv")).unwrap();
    let r1 = read_report(&d.path().join("e1/report.json")).unwrap();
    for b in &r1.report.bins {
        let expected = m.rows.iter().filter(|r| r.split == rotreg_core::data::Split::Test && r.bin == b.bin).count();
        assert_eq!(b.count, expected, "{:?}", b.bin);
    }
    // the output directory is part of the effective config, so compare the report bodies
    let r1b = read_report(&d.path().join("e1b/report.json")).unwrap();
    assert_eq!(r1.report, r1b.report);
    let r3 = read_report(&d.path().join("e3/report.json")).unwrap();
    assert_eq!(r1.report, r3.report);
    assert_eq!(r1.label, "pn");

    let o = ok(d.path(), &["--out", "tab", "report", "e1", "e3", "--labels", "one,three"]);
    assert!(o.stdout.contains("| one |") && o.stdout.contains("| three |"), "{}", o.stdout);
    let md = fs::read_to_string(d.path().join("tab/table.md")).unwrap();
    assert!(md.contains("moderate (0.2 ≤ O ≤ 0.4)"));
    assert!(md.contains("config_sha256"));
}

#[test]
fn predict_from_images() {
    use rotreg_core::data::render_sphere;
    use rotreg_core::geometry::CameraIntrinsics;
    let camera = "[camera]\nfx = 100.0\nfy = 100.0\ncx = 31.5\ncy = 23.5\nwidth = 64\nheight = 48\n";
    let d = setup(&format!("{SMALL_DATA}\n{camera}"));
    ok(d.path(), &["--config", "run.toml", "generate"]);
    ok(d.path(), &["--config", "run.toml", "train"]);
    let intr = CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap();
    let (depth, mask) = render_sphere([0.0, 0.0, 0.8], 0.1, &intr);
    rotreg::images::write_depth_mm(&d.path().join("d.pgm"), &depth).unwrap();
    rotreg::images::write_depth_pfm(&d.path().join("d.pfm"), &depth).unwrap();
    rotreg::images::write_mask(&d.path().join("m.pgm"), &mask).unwrap();
    let o = ok(d.path(), &["--config", "run.toml", "predict", "--depth", "d.pgm", "--mask", "m.pgm"]);
    let v: serde_json::Value = serde_json::from_str(o.stdout.trim()).unwrap();
    assert_eq!(v["axis_angle"].as_array().unwrap().len(), 3);
    assert!(v["angle_degrees"].as_f64().unwrap() <= 180.0);
    let o = ok(
        d.path(),
        &["--config", "run.toml", "predict", "--depth", "d.pfm", "--mask", "m.pgm", "--translation", "0,-0.01,0.8"],
    );
    let w: serde_json::Value = serde_json::from_str(o.stdout.trim()).unwrap();
    assert_eq!(w["translation"][1].as_f64(), Some(-0.01));

    let nocam = setup("");
    let o = rotreg(nocam.path(), &["--config", "run.toml", "predict", "--depth", "d.pgm", "--mask", "m.pgm"]);
    assert_eq!(o.code, 2);
}
