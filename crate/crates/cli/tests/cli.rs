use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dynseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = dynseg(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_twice_gives_identical_files() {
    let t = tempfile::tempdir().unwrap();
    ok(
        &["gen", "--scenes", "4", "--seed", "1", "--out", "a"],
        t.path(),
    );
    ok(
        &["gen", "--scenes", "4", "--seed", "1", "--out", "b"],
        t.path(),
    );
    let a = files(&t.path().join("a"));
    assert_eq!(a.len(), 5);
    assert_eq!(a, files(&t.path().join("b")));
    ok(
        &["gen", "--scenes", "4", "--seed", "2", "--out", "c"],
        t.path(),
    );
    assert_ne!(a, files(&t.path().join("c")));
}

#[test]
fn eval_of_ground_truth_is_all_ones() {
    let t = tempfile::tempdir().unwrap();
    ok(
        &["gen", "--scenes", "3", "--seed", "4", "--out", "d"],
        t.path(),
    );
    ok(
        &["infer", "--data", "d", "--oracle", "--out", "p"],
        t.path(),
    );
    ok(
        &[
            "eval",
            "--data",
            "d",
            "--predictions",
            "p/predictions.jsonl",
            "--out",
            "r.json",
        ],
        t.path(),
    );
    let doc: serde_json::Value =
        serde_json::from_slice(&fs::read(t.path().join("r.json")).unwrap()).unwrap();
    for k in [
        "map", "ap50", "ap25", "mcov", "mwcov", "mprec", "mrec", "det_ap25", "det_ap50",
    ] {
        assert_eq!(doc["metrics"][k], 1.0, "{k}");
    }
    assert_eq!(doc["config"]["nms_iou"], 0.3);
}

#[test]
fn sweep_rows_agree_across_radii() {
    let t = tempfile::tempdir().unwrap();
    ok(
        &["gen", "--scenes", "3", "--seed", "5", "--out", "d"],
        t.path(),
    );
    ok(&["sweep-radius", "--data", "d", "--out", "s.tsv"], t.path());
    let text = fs::read_to_string(t.path().join("s.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split('\t').collect())
        .collect();
    assert_eq!(rows.len(), 3);
    let radii: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(radii, vec![0.25, 0.5, 0.75]);
    for r in &rows[1..] {
        assert_eq!(r[1..], rows[0][1..]);
    }
    assert_eq!(rows[0][2], "1.000000");
}

#[test]
fn train_infer_eval_compose_and_rerun_identically() {
    let t = tempfile::tempdir().unwrap();
    ok(
        &["gen", "--scenes", "2", "--seed", "3", "--out", "d"],
        t.path(),
    );
    let train = |out: &str| {
        ok(
            &[
                "train", "--data", "d", "--out", out, "--steps", "4", "--warmup", "2", "--grid",
                "4", "--jobs", "1",
            ],
            t.path(),
        )
    };
    train("m1");
    train("m2");
    assert_eq!(files(&t.path().join("m1")), files(&t.path().join("m2")));
    ok(
        &["infer", "--data", "d", "--checkpoint", "m1", "--out", "p"],
        t.path(),
    );
    ok(
        &[
            "eval",
            "--data",
            "d",
            "--predictions",
            "p/predictions.jsonl",
            "--out",
            "r.json",
        ],
        t.path(),
    );
    let doc: serde_json::Value =
        serde_json::from_slice(&fs::read(t.path().join("p/config.json")).unwrap()).unwrap();
    assert_eq!(doc["config"]["model"]["grid"], 4);
    assert_eq!(doc["source"], "model");
    assert!(t.path().join("r.json").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let t = tempfile::tempdir().unwrap();
    fs::write(
        t.path().join("run.toml"),
        "nms_iou = 0.4\n[scene]\nthing_classes = 2\n",
    )
    .unwrap();
    ok(
        &[
            "--config",
            "run.toml",
            "gen",
            "--scenes",
            "1",
            "--out",
            "d",
            "--nms-iou",
            "0.5",
        ],
        t.path(),
    );
    let doc: serde_json::Value =
        serde_json::from_slice(&fs::read(t.path().join("d/config.json")).unwrap()).unwrap();
    assert_eq!(doc["config"]["nms_iou"], 0.5);
    assert_eq!(doc["config"]["scene"]["thing_classes"], 2);
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let t = tempfile::tempdir().unwrap();
    for args in [
        &["gen", "--scenes", "0", "--out", "d"][..],
        &["gen", "--scenes", "1", "--out", "d", "--radius", "-1"],
        &["gen", "--scenes", "1", "--out", "d", "--nms-iou", "2"],
        &["frobnicate"],
        &["grad-check", "--epsilon", "0.5"],
    ] {
        assert_eq!(dynseg(args, t.path()).status.code(), Some(2), "{args:?}");
    }
    fs::write(t.path().join("bad.toml"), "[model]\nheads = 0\n").unwrap();
    let out = dynseg(&["--config", "bad.toml", "selfcheck"], t.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tolerance_failure_names_the_check() {
    let t = tempfile::tempdir().unwrap();
    let out = dynseg(
        &["grad-check", "--instances", "2", "--tolerance", "1e-300"],
        t.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grad/"));
    ok(
        &["grad-check", "--instances", "2", "--out", "g.json"],
        t.path(),
    );
}

#[test]
fn walls_stay_stuff_after_a_file_round_trip() {
    let t = tempfile::tempdir().unwrap();
    ok(&["gen", "--scenes", "2", "--seed", "6", "--walls", "--out", "d"], t.path());
    ok(&["infer", "--data", "d", "--oracle", "--out", "p"], t.path());
    let out = ok(
        &["eval", "--data", "d", "--predictions", "p/predictions.jsonl", "--out", "r.json"],
        t.path(),
    );
    let doc: serde_json::Value =
        serde_json::from_slice(&fs::read(t.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(doc["metrics"]["mprec"], 1.0, "{}", String::from_utf8_lossy(&out.stdout));
    let p: serde_json::Value =
        serde_json::from_slice(&fs::read(t.path().join("p/config.json")).unwrap()).unwrap();
    assert_eq!(p["source"], "oracle");
}
