use std::path::Path;
use std::process::{Command, Output};

use gaugesphere::artifacts::mesh_from_container;
use gaugesphere::config::ModelConfig;
use gaugesphere::container::Container;
use gaugesphere::harness::dataset::dataset_from_container;
use gaugesphere::harness::render::read_png;
use gaugesphere::harness::stress::StressReport;
use gaugesphere::model::Checkpoint;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaugesphere")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path, rank: usize) -> std::path::PathBuf {
    let cfg = ModelConfig {
        output_rank: rank,
        levels: 1,
        dim: 8,
        heads: 2,
        blocks_per_stage: 1,
        epochs: 2,
        batch_size: 4,
        ..ModelConfig::default()
    };
    let path = dir.join("model.toml");
    std::fs::write(&path, cfg.to_toml_string()).unwrap();
    path
}

#[test]
fn config_subcommand_prints_parseable_defaults() {
    let out = ok(&["config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(ModelConfig::from_toml_str(&text).unwrap(), ModelConfig::default());
}

#[test]
fn shipped_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    assert_eq!(ModelConfig::load(&path).unwrap(), ModelConfig::default());
}

#[test]
fn mesh_tables_and_rotmaps() {
    let dir = tempfile::tempdir().unwrap();
    let (m1, m2) = (dir.path().join("r1.gsc"), dir.path().join("r2.gsc"));
    ok(&["mesh", "--rank", "1", "--out", p(&m1)]);
    ok(&["mesh", "--rank", "2", "--out", p(&m2)]);
    let mesh = mesh_from_container(&Container::read(&m2).unwrap()).unwrap();
    assert_eq!(mesh.len(), 162);

    let tables = dir.path().join("t.gsc");
    ok(&["tables", "--mesh", p(&m2), "--out", p(&tables)]);
    let t = Container::read(&tables).unwrap();
    assert_eq!(t.f64("alpha").unwrap().0, &[162, 7, 3]);
    assert_eq!(t.u32("transfer/parent").unwrap().1.len(), 162);

    let maps = dir.path().join("maps.gsc");
    ok(&["rotmap", "--mesh-token", p(&m1), "--mesh-out", p(&m2), "--seed", "3", "--mode", "zyx", "--count", "4", "--out", p(&maps)]);
    let c = Container::read(&maps).unwrap();
    let (shape, idx) = c.u32("idx_img").unwrap();
    assert_eq!(shape, &[4, 162]);
    assert!(idx.iter().all(|&i| i < 162));
    assert_eq!(c.f64("quaternions").unwrap().0, &[4, 4]);
    let again = dir.path().join("maps2.gsc");
    ok(&["rotmap", "--mesh-token", p(&m1), "--mesh-out", p(&m2), "--seed", "3", "--mode", "zyx", "--count", "4", "--out", p(&again)]);
    assert_eq!(std::fs::read(&maps).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn capped_rotmaps_stay_within_35_degrees() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("r1.gsc");
    ok(&["mesh", "--rank", "1", "--out", p(&m)]);
    let maps = dir.path().join("maps.gsc");
    ok(&["rotmap", "--mesh-token", p(&m), "--mesh-out", p(&m), "--mode", "capped35", "--count", "50", "--out", p(&maps)]);
    let c = Container::read(&maps).unwrap();
    for q in c.f64("quaternions").unwrap().1.chunks_exact(4) {
        let angle = 2.0 * q[0].abs().min(1.0).acos();
        assert!(angle <= 35f64.to_radians() + 1e-9);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("r1.gsc");
    ok(&["mesh", "--rank", "1", "--out", p(&m)]);

    let bogus_mode = cli(&["rotmap", "--mesh-token", p(&m), "--mesh-out", p(&m), "--mode", "bogus", "--out", p(&dir.path().join("x"))]);
    assert_eq!(bogus_mode.status.code(), Some(2));

    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "output_rank = 3\nlevels = 9\n").unwrap();
    let data = dir.path().join("d.gsc");
    ok(&["gen-data", "--rank", "1", "--count", "2", "--out", p(&data)]);
    let r = cli(&["train", "--config", p(&bad_cfg), "--data", p(&data), "--out", p(&dir.path().join("c"))]);
    assert_eq!(r.status.code(), Some(2));

    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "output_rnak = 3\n").unwrap();
    let r = cli(&["train", "--config", p(&typo), "--data", p(&data), "--out", p(&dir.path().join("c"))]);
    assert_eq!(r.status.code(), Some(2));

    let junk = dir.path().join("junk.gsc");
    std::fs::write(&junk, b"not a container").unwrap();
    let cfg = small_config(dir.path(), 2);
    let r = cli(&["train", "--config", p(&cfg), "--data", p(&junk), "--out", p(&dir.path().join("c"))]);
    assert_eq!(r.status.code(), Some(3));

    let missing = cli(&["render", "--data", p(&dir.path().join("nope.gsc")), "--out", p(&dir.path().join("x.png"))]);
    assert_eq!(missing.status.code(), Some(3));

    let out_of_range = cli(&["render", "--data", p(&data), "--sample", "5", "--out", p(&dir.path().join("x.png"))]);
    assert_eq!(out_of_range.status.code(), Some(3));

    let rank_mismatch = cli(&["train", "--config", p(&small_config(dir.path(), 2)), "--data", p(&data), "--out", p(&dir.path().join("c"))]);
    assert_eq!(rank_mismatch.status.code(), Some(2));

    assert_eq!(cli(&["mesh"]).status.code(), Some(2));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    ok(&["gen-data", "--rank", "2", "--count", "6", "--seed", "1", "--out", p(&d("train.gsc"))]);
    ok(&["gen-data", "--rank", "2", "--count", "3", "--seed", "2", "--out", p(&d("test.gsc"))]);
    let cfg = small_config(dir.path(), 2);
    ok(&["train", "--config", p(&cfg), "--data", p(&d("train.gsc")), "--val", p(&d("test.gsc")), "--out", p(&d("ck.gsc")), "--log", p(&d("log.jsonl"))]);
    let log = std::fs::read_to_string(d("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["seg_loss"].as_f64().unwrap().is_finite());
    }
    let ck = Checkpoint::load(&d("ck.gsc")).unwrap();
    assert_eq!(ck.model.config.output_rank, 2);

    ok(&["stress", "--checkpoint", p(&d("ck.gsc")), "--data", p(&d("test.gsc")), "--config", p(&cfg), "--rotations", "2", "--repeats", "2", "--out", p(&d("report.json"))]);
    let report: StressReport = serde_json::from_str(&std::fs::read_to_string(d("report.json")).unwrap()).unwrap();
    report.check().unwrap();
    assert_eq!(report.per_rotation.len(), 4);
    assert_eq!(report.samples, 3);

    for field in ["labels", "features", "prediction"] {
        let png = d(&format!("{field}.png"));
        ok(&["render", "--data", p(&d("test.gsc")), "--field", field, "--checkpoint", p(&d("ck.gsc")), "--height", "32", "--out", p(&png)]);
        let img = read_png(&png).unwrap();
        assert_eq!((img.height, img.width), (32, 64));
    }

    let (set, rank) = dataset_from_container(&Container::read(&d("test.gsc")).unwrap()).unwrap();
    assert_eq!((set.len(), rank), (3, 2));
    let r = cli(&["stress", "--checkpoint", p(&d("ck.gsc")), "--data", p(&d("train.gsc")), "--config", p(&small_config(dir.path(), 3)), "--out", p(&d("r2.json"))]);
    assert_eq!(r.status.code(), Some(2));
}
