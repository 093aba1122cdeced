use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn seedprop(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seedprop"))
        .arg("--root")
        .arg(root)
        .args(args)
        .env_remove("SEEDPROP_TOKEN")
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = seedprop(root, args);
    assert!(
        out.status.success(),
        "seedprop {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_id(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("run "))
        .expect("run line")
        .to_string()
}

fn synth(root: &Path, name: &str) -> (String, String) {
    let out = ok(
        root,
        &[
            "synth", name, "--frames", "20", "--drifting", "4", "--exiting", "1", "--width", "640",
            "--height", "360", "--pair-frames", "10",
        ],
    );
    assert!(out.contains("1 pairs"), "{out}");
    let scene = out.lines().find_map(|l| l.strip_prefix("scene ")).unwrap().to_string();
    let gt = out.lines().find_map(|l| l.strip_prefix("ground truth ")).unwrap().to_string();
    (scene, gt)
}

fn eval_json(root: &Path, project: &str, run: &str) -> Value {
    let p = root.join(project).join("reports").join(run).join("eval.json");
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn synth_run_resume_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (scene, gt) = synth(root, "vid");
    let args = ["run", "vid", "--scene", &scene, "--gt", &gt, "--pairs", "0"];

    let first = ok(root, &args);
    let id = run_id(&first);
    assert!(first.contains("Method,"), "{first}");
    assert!(first.contains("throughput"), "{first}");
    assert!(!first.contains("already committed"));

    let second = ok(root, &args);
    assert_eq!(run_id(&second), id);
    assert_eq!(second.matches("already committed").count(), 6, "{second}");
    let report = eval_json(root, "vid", &id);
    assert!(report["report"]["recall"].as_f64().unwrap() > 0.8, "{report}");

    // Same chain without the filter gets its own run directory.
    let nf = ok(root, &["run", "vid", "--scene", &scene, "--gt", &gt, "--pairs", "0", "--no-filter"]);
    let nf_id = run_id(&nf);
    assert_ne!(nf_id, id);

    let table = ok(root, &["report", &format!("vid/{id}"), &format!("vid/{nf_id}"), "--combine", "micro"]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "{table}");
    assert!(lines[3].starts_with("combined (micro)"));

    let missing = seedprop(root, &["report", "vid/ffffffffffff"]);
    assert!(!missing.status.success());
}

#[test]
fn stages_stop_where_asked() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (scene, _) = synth(root, "vid");
    let out = ok(root, &["segment", "vid", "--scene", &scene, "--pairs", "0", "--mode", "fixed"]);
    let id = run_id(&out);
    let vid = root.join("vid");
    let prop = vid.join("labels/propagated").join(&id);
    assert!(prop.join("tracks").is_dir(), "{}", prop.display());
    assert!(prop.join("fitted").is_dir());
    assert!(!vid.join("datasets").join(&id).exists());

    let no_gt = seedprop(root, &["eval", "vid", "--scene", &scene]);
    assert!(!no_gt.status.success());
    assert!(String::from_utf8_lossy(&no_gt.stderr).contains("--gt"));
}

#[test]
fn process_backends_match_in_process_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (scene, gt) = synth(root, "vid");
    let inproc = ok(root, &["run", "vid", "--scene", &scene, "--gt", &gt, "--pairs", "0"]);
    let cmd = format!("{} oracle-backend --scene {scene}", env!("CARGO_BIN_EXE_seedprop"));
    let viaproc = ok(
        root,
        &[
            "run", "vid", "--tracker-cmd", &cmd, "--segmenter-cmd", &cmd, "--gt", &gt, "--pairs", "0",
            "--backend-timeout", "60",
        ],
    );
    let (a, b) = (run_id(&inproc), run_id(&viaproc));
    assert_ne!(a, b);
    assert_eq!(eval_json(root, "vid", &a)["report"], eval_json(root, "vid", &b)["report"]);
}

#[test]
fn init_seed_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root, "src");
    let frames = root.join("src").join("frames");
    let out = ok(
        root,
        &[
            "init", "copy", "--width", "640", "--height", "360", "--frames", "20", "--images",
            frames.to_str().unwrap(),
        ],
    );
    assert!(out.contains("20 images"), "{out}");
    let seed = root.join("src").join("synthetic").join("seed_000000_fixed.json");
    let out = ok(root, &["seed", "copy", seed.to_str().unwrap(), "--frame-count", "12"]);
    assert_eq!(out.trim(), "pair 0");
    let p: Value = serde_json::from_str(&std::fs::read_to_string(root.join("copy").join("manifest")).unwrap()).unwrap();
    assert_eq!(p["pairs"].as_array().unwrap().len(), 1);

    let bad = root.join("bad.json");
    std::fs::write(&bad, "{\"version\": 9}").unwrap();
    assert!(!seedprop(root, &["seed", "copy", bad.to_str().unwrap()]).status.success());

    let cfg = ok(root, &["config", "--scene", "scene.json", "--no-sam", "--epochs", "3", "--iou", "0.6"]);
    let v: Value = serde_json::from_str(&cfg).unwrap();
    assert_eq!(v["segfit"]["enabled"], false);
    assert_eq!(v["train"]["epochs"], 3);
    assert_eq!(v["matching"]["iou_threshold"], 0.6);
    assert!(Path::new(v["backends"]["tracker"]["scene"].as_str().unwrap()).is_absolute());

    // A saved config reloads to the same run id.
    let file = root.join("cfg.json");
    std::fs::write(&file, &cfg).unwrap();
    let again = ok(root, &["config", "--config", file.to_str().unwrap()]);
    assert_eq!(again, cfg);

    let neither = seedprop(root, &["config"]);
    assert!(!neither.status.success());
}
