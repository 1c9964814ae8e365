use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
epochs = 2
batch = 2
eval_every = 1
data.train = 4
data.test = 2
scene.frames = 4
scene.height = 16
scene.width = 16
scene.vertices = 6
model.backbone = 4,8
model.groups = 2
model.dim = 8
model.layers = 1
";

fn remocap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_remocap")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = remocap(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let maps = dir.path().join("maps");

    ok(&["gen-data", "--config", s(&conf), "--out", s(&data)]);
    assert!(data.join("train.rmcd").exists() && data.join("test.rmcd").exists());

    let first = ok(&["train", "--config", s(&conf), "--data", s(&data), "--out", s(&run), "--log-every", "0"]);
    let again = ok(&[
        "train", "--config", s(&conf), "--data", s(&data), "--out", s(&dir.path().join("run2")),
        "--log-every", "0", "--sequential",
    ]);
    let hash = |text: &str| text.split("hash ").nth(1).unwrap().trim().to_string();
    assert_eq!(hash(&first), hash(&again));

    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(run.join("train_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["validation"].as_array().unwrap().len(), 2);

    let ckpt = run.join("checkpoint.rmck");
    let report_path = dir.path().join("report.json");
    let printed = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report_path)]);
    let report: serde_json::Value = serde_json::from_str(&printed).unwrap();
    assert_eq!(fs::read_to_string(&report_path).unwrap().trim(), printed.trim());
    for key in ["mpjpe", "pa_mpjpe", "mpvpe", "accel_error"] {
        assert!(report[key].as_f64().unwrap() >= 0.0, "{key}");
    }
    assert_eq!(report, summary["validation"][1]["report"]);

    let listed = ok(&["export-heatmaps", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&maps), "--frames", "0,3"]);
    assert_eq!(listed.lines().count(), 6);
    let csv = fs::read_to_string(maps.join("seq0_frame3_post_md.csv")).unwrap();
    assert!(csv.starts_with("# tap=post_md shape=4x4"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn ablation_and_bad_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&conf), "--out", s(&data), "--occlusion-level", "0"]);

    let out = remocap(&["train", "--config", s(&conf), "--data", s(&data), "--out", s(dir.path()), "--ablation", "xyz"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("xyz"));

    let out = remocap(&["eval", "--ckpt", s(&dir.path().join("none.rmck")), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "scene.occlusion_level = 2\n").unwrap();
    let out = remocap(&["gen-data", "--config", s(&bad), "--out", s(&data)]);
    assert_eq!(out.status.code(), Some(2));

    ok(&["train", "--config", s(&conf), "--data", s(&data), "--out", s(&dir.path().join("base")),
         "--ablation", "sd,md,vel", "--log-every", "0"]);
}

#[test]
fn gradcheck_exit_codes() {
    let out = ok(&["gradcheck", "sd"]);
    assert!(out.contains("gradcheck: PASS"));

    let out = remocap(&["gradcheck", "losses", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradcheck: FAIL"));

    assert_eq!(remocap(&["gradcheck", "nonsense"]).status.code(), Some(2));
}
