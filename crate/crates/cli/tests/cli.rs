use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wsvos_core::metrics::MetricsReport;

fn wsvos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsvos"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_line(o: &Output) -> serde_json::Value {
    let err = stderr(o);
    let last = err.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not JSON ({e}): {last}"))
}

const TINY: &str = r#"
[encoder]
embed_dim = 6
depth = 1

[teacher]
hidden_width = 6
out_channels = 5

[student]
hidden_width = 6
out_channels = 5

[trainer]
teacher_only_epochs = 1
joint_epochs = 2
batch_size = 8
lr = 0.001

[data]
train = "train"
test = "test"

[synth]
frame_size = [32, 32]
clip_length = 4
object_size_range = [5, 8]
"#;

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn synth(cfg: &Path, out: &Path, count: usize, seed: u64) {
    let o = wsvos(&["synth", "--config", p(cfg), "--count", &count.to_string(), "--out", p(out), "--seed", &seed.to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn eval_without_checkpoint_names_the_flag() {
    let o = wsvos(&["eval", "--data", "x", "--report", "r.json"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    let e = error_line(&o);
    assert_eq!(e["error"], "usage");
    assert!(e["message"].as_str().unwrap().contains("--ckpt"), "{e}");
}

#[test]
fn unknown_config_key_is_rejected_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[trainer]\nlearning_rate = 0.1\n");
    let o = wsvos(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("out"))]);
    assert!(!o.status.success());
    let e = error_line(&o);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("trainer.learning_rate"), "{e}");
}

#[test]
fn config_errors_list_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[trainer]\nlr = 0.0\nbatch_size = 0\n[post]\nthreshold = 1.5\n[data]\ntrain = \"nowhere\"\n",
    );
    let o = wsvos(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("out"))]);
    assert!(!o.status.success());
    let e = error_line(&o);
    let msg = e["message"].as_str().unwrap();
    for key in ["trainer.lr", "trainer.batch_size", "post.threshold"] {
        assert!(msg.contains(key), "{key} missing from {msg}");
    }
}

#[test]
fn missing_dataset_is_a_dataset_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = wsvos(&["stats", "--data", p(dir.path())]);
    assert!(!o.status.success());
    assert_eq!(error_line(&o)["error"], "dataset");
}

#[test]
fn end_to_end_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, TINY);
    synth(&cfg, &root.join("train"), 50, 1);
    synth(&cfg, &root.join("test"), 10, 2);

    let out = root.join("run");
    let o = wsvos(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.toml", "checkpoints/final.ckpt", "logs/train_log.jsonl", "reports/full.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(out.join("overlays").is_dir());
    let log = fs::read_to_string(out.join("logs/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let report = root.join("reports").join("eval.json");
    let ckpt = out.join("checkpoints/final.ckpt");
    let o = wsvos(&[
        "eval", "--ckpt", p(&ckpt), "--data", p(&root.join("test")), "--variant", "fusion", "--report", p(&report),
        "--masks", p(&root.join("masks")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = MetricsReport::from_json(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.variant, "fusion");
    assert_eq!(r.clips_evaluated, 10);
    assert!(r.mean_iou.is_some());
    assert!(root.join("masks/classes.json").is_file());

    let o = wsvos(&["viz", "--ckpt", p(&ckpt), "--data", p(&root.join("test")), "--out", p(&out.join("overlays"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pngs = fs::read_dir(out.join("overlays")).unwrap().count();
    assert_eq!(pngs, 4);

    // The echoed config reproduces the run exactly.
    let again = root.join("again");
    let o = wsvos(&["train", "--config", p(&out.join("config.toml")), "--out", p(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join("checkpoints/final.ckpt")).unwrap(),
        fs::read(again.join("checkpoints/final.ckpt")).unwrap()
    );
    assert_eq!(log, fs::read_to_string(again.join("logs/train_log.jsonl")).unwrap());
}

#[test]
fn untrained_student_triggers_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let text = TINY.replace("joint_epochs = 2", "joint_epochs = 0").replace("test = \"test\"\n", "");
    let cfg = write_config(root, &text);
    synth(&cfg, &root.join("train"), 12, 3);
    let out = root.join("run");
    let o = wsvos(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = out.join("checkpoints/final.ckpt");
    let report = root.join("r.json");
    let args = |variant: &'static str| {
        vec![
            "eval".to_string(), "--ckpt".into(), p(&ckpt).into(), "--data".into(), p(&root.join("train")).into(),
            "--variant".into(), variant.into(), "--report".into(), p(&report).into(),
        ]
    };
    let run = |a: Vec<String>| Command::new(env!("CARGO_BIN_EXE_wsvos")).args(a).output().unwrap();
    let o = run(args("full"));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    let o = run(args("t"));
    assert!(!stderr(&o).contains("warning"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let text = TINY.replace("test = \"test\"\n", "");
    let cfg = write_config(root, &text);
    synth(&cfg, &root.join("train"), 10, 4);
    let full = root.join("full");
    assert!(wsvos(&["train", "--config", p(&cfg), "--out", p(&full)]).status.success());

    let part = root.join("part");
    let o = wsvos(&["train", "--config", p(&cfg), "--out", p(&part), "--stop-after", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!part.join("checkpoints/final.ckpt").exists());
    let o = wsvos(&["train", "--resume", p(&part.join("checkpoints/last.ckpt")), "--out", p(&part)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(full.join("checkpoints/final.ckpt")).unwrap(),
        fs::read(part.join("checkpoints/final.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(full.join("logs/train_log.jsonl")).unwrap(),
        fs::read_to_string(part.join("logs/train_log.jsonl")).unwrap()
    );
}

#[test]
fn split_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let frames = root.join("frames");
    fs::create_dir_all(&frames).unwrap();
    let clip = wsvos_core::grid::Volume::from_fn([8, 8, 1, 3], |x, y, _, c| ((x + y + c) % 4) as f64 / 3.0);
    for t in 0..7 {
        wsvos_core::dataio::save_frame_png(&clip, 0, &frames.join(format!("{t}.png"))).unwrap();
    }
    let mut csv = String::from("hook,grasper\n");
    for t in 0..7 {
        csv.push_str(if t < 3 { "1,0\n" } else if t == 3 { "0,1\n" } else { "0,0\n" });
    }
    fs::write(root.join("labels.csv"), csv).unwrap();
    let out = root.join("clips");
    let o = wsvos(&[
        "split", "--frames", p(&frames), "--labels", p(&root.join("labels.csv")), "--clip-len", "2", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = wsvos_core::dataio::load_dataset(&out).unwrap();
    // Windows [0,1] [2,3] [4,5]; the last has no labels; frame 6 is dropped.
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.clips[1].label.to_bit_string(), "11");

    let o = wsvos(&["stats", "--data", p(&out)]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("hook") && text.contains("75.0"), "{text}");
}
