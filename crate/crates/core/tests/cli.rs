use std::path::Path;
use std::process::Command;

use trisoup::cli::{self, SceneFile, SyntheticSpec};
use trisoup::trainer::{InitMode, TrainConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trisoup"))
}

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec { triangles: 6, views: 4, test_views: 2, width: 24, height: 24, seed: 5, points: 300, ..Default::default() }
}

fn tiny_config(data: &Path, out: &Path) -> TrainConfig {
    TrainConfig {
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        iterations: 40,
        coarse_end: 20,
        adaptive_period: 10,
        budget: 12,
        views_per_step: 2,
        split_views: 2,
        init: InitMode::Points,
        points: data.join("points.ply"),
        init_radius: 0.1,
        eval_every: 20,
        seed: 3,
        ..Default::default()
    }
}

fn csv_without_time(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
}

#[test]
fn training_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cli::make_synthetic(&tiny_spec(), &data).unwrap();
    let a = tiny_config(&data, &dir.path().join("a"));
    let b = tiny_config(&data, &dir.path().join("b"));
    cli::run_training(&a).unwrap();
    cli::run_training(&b).unwrap();
    let read = |p: &Path| std::fs::read(p.join("scene.bin")).unwrap();
    assert_eq!(read(&a.out), read(&b.out));
    let rows = csv_without_time(&a.out.join("metrics.csv"));
    assert_eq!(rows.len(), 41);
    assert_eq!(rows, csv_without_time(&b.out.join("metrics.csv")));
}

#[test]
fn train_render_eval_pack_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec_path = dir.path().join("spec.toml");
    std::fs::write(&spec_path, toml::to_string(&tiny_spec()).unwrap()).unwrap();
    let ok = bin().args(["make-synthetic", "--spec"]).arg(&spec_path).arg("--out").arg(&data).status().unwrap();
    assert!(ok.success());

    let out = dir.path().join("run");
    let cfg_path = dir.path().join("train.toml");
    std::fs::write(&cfg_path, toml::to_string(&tiny_config(&data, &out)).unwrap()).unwrap();
    let ok = bin().args(["--threads", "1", "train", "--config"]).arg(&cfg_path).status().unwrap();
    assert!(ok.success());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert!(report["psnr"].as_f64().unwrap().is_finite());

    let scene = out.join("scene.bin");
    let cams = data.join("transforms_test.json");
    for name in ["r1", "r2"] {
        let ok = bin().args(["render", "--scene"]).arg(&scene).arg("--cameras").arg(&cams).arg("--out").arg(dir.path().join(name)).status().unwrap();
        assert!(ok.success());
    }
    for i in 0..2 {
        let f = format!("r_{i:03}.png");
        assert_eq!(std::fs::read(dir.path().join("r1").join(&f)).unwrap(), std::fs::read(dir.path().join("r2").join(&f)).unwrap());
    }

    let eval = bin().args(["eval", "--scene"]).arg(&scene).arg("--data").arg(&data).output().unwrap();
    assert!(eval.status.success());
    assert!(String::from_utf8_lossy(&eval.stdout).contains("mean"));

    let packed = dir.path().join("packed");
    let ok = bin().args(["pack", "--scene"]).arg(&scene).arg("--out").arg(&packed).status().unwrap();
    assert!(ok.success());
    let n = SceneFile::load(&scene).unwrap().soup.len();
    assert_eq!(std::fs::metadata(packed.join("geometry.bin")).unwrap().len(), 36 * n as u64);
    for f in ["atlas_a.png", "atlas_b.png", "layout.json", "net.json", "meta.json"] {
        assert!(packed.join(f).exists(), "{f} missing");
    }
}

#[test]
fn ground_truth_scene_reproduces_its_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cli::make_synthetic(&tiny_spec(), &data).unwrap();
    let table = cli::cmd_eval(&data.join("gt.scene"), &data, "train").unwrap();
    assert_eq!(table.rows.len(), 4);
    // PNG quantization is the only difference
    assert!(table.mean.mae < 1.0 / 255.0, "{}", table.mean.mae);
}

#[test]
fn missing_scene_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["render", "--scene"])
        .arg(dir.path().join("nope.bin"))
        .arg("--cameras")
        .arg(dir.path().join("nope.json"))
        .arg("--out")
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope.bin"), "{err}");
}

#[test]
fn corrupt_scene_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.bin");
    std::fs::write(&p, b"not a scene").unwrap();
    assert!(SceneFile::load(&p).is_err());
}

#[test]
fn unknown_config_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.toml");
    std::fs::write(&p, "iterations = 10\nlearning_rate = 1.0\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&p).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn dataset_with_missing_images_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cli::make_synthetic(&tiny_spec(), &data).unwrap();
    std::fs::remove_dir_all(data.join("test")).unwrap();
    assert!(cli::load_split(&data, "transforms_test.json", [1.0; 3], None).is_err());
    assert!(cli::load_split(&data, "transforms_train.json", [1.0; 3], None).is_ok());
}
