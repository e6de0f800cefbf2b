use std::path::Path;
use std::process::{Command, Output};

use svcn_core::grid::voxelize;
use svcn_core::io::{load_pcxl, save_with};

const TINY_SCENE: &str = r#"{"extent": 6.0, "density": 100.0}"#;

fn svcn(args: &[&str]) -> Output {
    svcn_env(args, None)
}

fn svcn_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_svcn"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("SVCN_SEED");
    if let Some(s) = seed {
        cmd.env("SVCN_SEED", s);
    }
    cmd.output().expect("run svcn")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "svcn failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_levels() -> String {
    let enc = vec!["[4,4]"; 7].join(",");
    let dec = vec!["[4,4]"; 6].join(",");
    format!(r#"{{"encoder": [{enc}], "decoder": [{dec}]}}"#)
}

fn gen_scenes(dir: &Path, out: &str, count: &str, seed: &str, jobs: &str) {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, TINY_SCENE).unwrap();
    ok(svcn(&["gen-scenes", "--spec", p(&spec), "--out", p(&dir.join(out)), "--count", count, "--seed", seed, "--jobs", jobs]));
}

fn bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn scene_generation_is_reproducible_across_jobs_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    gen_scenes(dir.path(), "a", "3", "7", "1");
    gen_scenes(dir.path(), "b", "3", "7", "3");
    let spec = dir.path().join("spec.json");
    ok(svcn_env(&["gen-scenes", "--spec", p(&spec), "--out", p(&dir.path().join("c")), "--count", "3", "--seed", "0"], Some("7")));
    for i in 0..3 {
        let name = format!("scene_{i:05}.pcxl");
        let a = bytes(&dir.path().join("a").join(&name));
        assert_eq!(a, bytes(&dir.path().join("b").join(&name)));
        assert_eq!(a, bytes(&dir.path().join("c").join(&name)));
    }
    assert_ne!(bytes(&dir.path().join("a/scene_00000.pcxl")), bytes(&dir.path().join("a/scene_00001.pcxl")));
}

#[test]
fn self_pattern_resampling_reproduces_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_scenes(d, "scenes", "1", "1", "1");
    let scene = d.join("scenes/scene_00000.pcxl");
    ok(svcn(&["pattern", "--preset", "ring32", "--out", p(&d.join("r32.patt"))]));
    let sensor = "0.3,-0.2,1.8";
    ok(svcn(&["sample", "--scene", p(&scene), "--pattern", p(&d.join("r32.patt")), "--sensor", sensor, "--out", p(&d.join("frame.pcxl"))]));
    ok(svcn(&["pattern", "--from-frame", p(&d.join("frame.pcxl")), "--sensor", sensor, "--out", p(&d.join("self.patt"))]));
    ok(svcn(&["sample", "--scene", p(&d.join("frame.pcxl")), "--pattern", p(&d.join("self.patt")), "--sensor", sensor, "--visible", "--out", p(&d.join("again.pcxl"))]));
    let (a, b) = (load_pcxl(d.join("frame.pcxl")).unwrap(), load_pcxl(d.join("again.pcxl")).unwrap());
    assert!(!a.is_empty());
    let sorted = |c: &svcn_core::PointCloud| {
        let mut v: Vec<[u64; 3]> = c.points.iter().map(|q| q.map(f64::to_bits)).collect();
        v.sort();
        v
    };
    assert_eq!(sorted(&a), sorted(&b));

    ok(svcn(&["sample", "--scene", p(&scene), "--pattern", p(&d.join("r32.patt")), "--sensor", sensor, "--augment", "--keep", "0.5", "--out", p(&d.join("aug.pcxl"))]));
    assert!(load_pcxl(d.join("aug.pcxl")).unwrap().len() < a.len());
}

#[test]
fn eval_completion_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_scenes(d, "scenes", "1", "2", "1");
    let scene = d.join("scenes/scene_00000.pcxl");
    let (grid, _) = voxelize(&load_pcxl(&scene).unwrap(), 0.2, [0.1, -0.3, 0.0]).unwrap();
    save_with(d.join("gt.svgr"), &grid, |g, w| g.write_to(w)).unwrap();
    ok(svcn(&["eval-completion", "--pred", p(&d.join("gt.svgr")), "--gt", p(&scene), "--report", p(&d.join("r.json"))]));
    let r: serde_json::Value = serde_json::from_slice(&bytes(&d.join("r.json"))).unwrap();
    assert_eq!(r["iou"], 1.0);
    assert_eq!(r["cd"], 0.0);
}

#[test]
fn train_complete_and_adapt_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_scenes(d, "scenes", "3", "3", "1");
    ok(svcn(&["pattern", "--preset", "ring32", "--out", p(&d.join("r32.patt"))]));
    ok(svcn(&["make-pairs", "--scenes", p(&d.join("scenes")), "--pattern", p(&d.join("r32.patt")), "--out", p(&d.join("pairs")), "--jobs", "2"]));
    assert!(d.join("pairs/pair_00002_gt.pcxl").exists());

    let cfg = format!(r#"{{"svcn": {{"levels": {}}}, "train": {{"max_steps": 3, "checkpoint_every": 2}}, "val_pairs": 1}}"#, tiny_levels());
    std::fs::write(d.join("stage.json"), cfg).unwrap();
    let gen_out = d.join("gen");
    ok(svcn(&["train-gen", "--config", p(&d.join("stage.json")), "--data", p(&d.join("pairs")), "--out", p(&gen_out)]));
    let log = std::fs::read_to_string(gen_out.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(gen_out.join("generation_000002.svck").exists());
    let g = gen_out.join("generation.svck");

    ok(svcn(&["train-refine", "--config", p(&d.join("stage.json")), "--data", p(&d.join("pairs")), "--gen", p(&g), "--out", p(&d.join("ref"))]));
    let r = d.join("ref/refinement.svck");
    let frame = d.join("pairs/pair_00000_in.pcxl");
    ok(svcn(&["complete", "--in", p(&frame), "--gen", p(&g), "--refine", p(&r), "--out", p(&d.join("c.svgr"))]));
    ok(svcn(&["eval-completion", "--pred", p(&d.join("c.svgr")), "--gt", p(&d.join("pairs/pair_00000_gt.pcxl")), "--report", p(&d.join("e.json"))]));

    // Wrong checkpoint kind is a configuration error.
    let wrong = svcn(&["complete", "--in", p(&frame), "--gen", p(&r), "--out", p(&d.join("x.svgr"))]);
    assert_eq!(wrong.status.code(), Some(2));

    let seg = format!(r#"{{"seg": {{"levels": {}}}, "train": {{"max_steps": 2}}}}"#, tiny_levels());
    std::fs::write(d.join("seg.json"), seg).unwrap();
    std::fs::create_dir_all(d.join("src")).unwrap();
    std::fs::create_dir_all(d.join("tgt")).unwrap();
    for i in 0..2 {
        std::fs::copy(d.join(format!("pairs/pair_{i:05}_in.pcxl")), d.join(format!("src/f{i}.pcxl"))).unwrap();
    }
    std::fs::copy(d.join("pairs/pair_00002_in.pcxl"), d.join("tgt/f.pcxl")).unwrap();
    ok(svcn(&["train-seg", "--config", p(&d.join("seg.json")), "--data", p(&d.join("src")), "--gen", p(&g), "--refine", p(&r), "--out", p(&d.join("segout"))]));
    assert!(d.join("segout/segmenter.svck").exists());

    std::fs::create_dir_all(d.join("ck")).unwrap();
    for side in ["source", "target"] {
        std::fs::copy(&g, d.join(format!("ck/{side}_generation.svck"))).unwrap();
        std::fs::copy(&r, d.join(format!("ck/{side}_refinement.svck"))).unwrap();
    }
    for mode in ["none", "b1", "b2", "svcn"] {
        let report = d.join(format!("adapt_{mode}.json"));
        ok(svcn(&[
            "adapt", "--source-dir", p(&d.join("src")), "--target-dir", p(&d.join("tgt")), "--ckpts", p(&d.join("ck")),
            "--report", p(&report), "--mode", mode, "--config", p(&d.join("seg.json")),
        ]));
        let r: serde_json::Value = serde_json::from_slice(&bytes(&report)).unwrap();
        assert_eq!(r["mode"], mode);
        let m = r["miou"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&m));
    }
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(svcn(&["gen-scenes", "--bogus"]).status.code(), Some(2));
    std::fs::write(d.join("bad.json"), "{ not json").unwrap();
    assert_eq!(svcn(&["gen-scenes", "--spec", p(&d.join("bad.json")), "--out", p(d)]).status.code(), Some(2));
    assert_eq!(svcn_env(&["gen-scenes", "--out", p(&d.join("s")), "--count", "1"], Some("abc")).status.code(), Some(2));
    std::fs::write(d.join("x.pcxl"), b"PCXLgarbage").unwrap();
    std::fs::write(d.join("gt.pcxl"), b"").unwrap();
    let out = svcn(&["sample", "--scene", p(&d.join("x.pcxl")), "--pattern", p(&d.join("x.pcxl")), "--sensor", "0,0,0", "--out", p(&d.join("y.pcxl"))]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(svcn(&["sample", "--scene", "a", "--pattern", "b", "--sensor", "1,2", "--out", "c"]).status.code(), Some(2));
}

#[test]
fn diverging_training_aborts_with_numeric_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_scenes(d, "scenes", "2", "5", "1");
    ok(svcn(&["pattern", "--preset", "ring32", "--out", p(&d.join("r32.patt"))]));
    ok(svcn(&["make-pairs", "--scenes", p(&d.join("scenes")), "--pattern", p(&d.join("r32.patt")), "--out", p(&d.join("pairs"))]));
    let cfg = format!(r#"{{"svcn": {{"levels": {}}}, "train": {{"max_steps": 20, "lr_gen": 1e300}}}}"#, tiny_levels());
    std::fs::write(d.join("boom.json"), cfg).unwrap();
    let out = svcn(&["train-gen", "--config", p(&d.join("boom.json")), "--data", p(&d.join("pairs")), "--out", p(&d.join("gen"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
