use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evenhancer::dataio::load_frames_dir;
use evenhancer::Config;

const TINY: &str = r#"
seed = 5
[model]
channels = 4
segments = 3
res_blocks = 1
[livt]
channels = 4
frequencies = 2
mlp_hidden = [8, 8]
[train]
stage1_iters = 3
stage2_iters = 2
stage2_scales = [1.0, 2.0]
t = 2
stage1_s = 2.0
crop = 4
batch_size = 1
val_every = 2
query_pixels = 32
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_evenhancer"));
    c.env_remove(evenhancer::cli::OUT_ENV);
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic frames plus a trained tiny checkpoint in `root`.
fn trained(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let o = run(&["--out", p(&data), "simulate", "--synthetic", "6", "--size", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run_dir = root.join("run");
    let o = run(&["--config", p(&cfg), "--out", p(&run_dir), "train", "--frames-dir", p(&data.join("frames"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    (data.join("frames"), run_dir.join("last.ckpt"))
}

#[test]
fn selftest_exits_zero() {
    let o = run(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{out}");
}

#[test]
fn help_lists_every_config_key() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for (k, _) in Config::documented_keys() {
        assert!(text.contains(&format!("  {k} = ")), "--help is missing {k}");
    }
}

#[test]
fn validation_errors_exit_one_and_name_the_culprit() {
    let o = run(&["simulate", "--synthetic", "3", "no_such.key=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such"), "{}", stderr(&o));

    let o = run(&["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--frames-dir"));

    let o = run(&["infer", "--s", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--checkpoint"));

    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_files_are_runtime_failures() {
    let o = run(&["infer", "--checkpoint", "/nonexistent/x.ckpt", "--frames-dir", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/x.ckpt"));
}

#[test]
fn simulate_is_deterministic_and_honours_the_env_out_dir() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let o = bin().env(evenhancer::cli::OUT_ENV, &a).args(["simulate", "--synthetic", "4", "--size", "12"]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["--out", p(&b), "simulate", "--synthetic", "4", "--size", "12"]);
    assert!(o.status.success());
    assert_eq!(fs::read(a.join("events.csv")).unwrap(), fs::read(b.join("events.csv")).unwrap());
    let csv = fs::read_to_string(a.join("events.csv")).unwrap();
    assert!(csv.starts_with("t,x,y,p\n") && csv.lines().count() > 1);
    // From a frame folder: same input, same bytes.
    let (c, d) = (root.path().join("c"), root.path().join("d"));
    for dir in [&c, &d] {
        let o = run(&["--out", p(dir), "simulate", "--frames-dir", p(&a.join("frames"))]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(c.join("events.csv")).unwrap(), fs::read(d.join("events.csv")).unwrap());
}

#[test]
fn train_infer_eval_profile_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let (frames, ckpt) = trained(root.path());
    let run_dir = ckpt.parent().unwrap();
    assert!(run_dir.join("best.ckpt").exists());
    let log = fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"event\":\"step\"")).count(), 5);

    // Same argv and seed: byte-identical checkpoint.
    let (_, again) = trained(&root.path().join("second"));
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());

    let inf = root.path().join("inf_s4_t8");
    let o = run(&["--out", p(&inf), "infer", "--checkpoint", p(&ckpt), "--frames-dir", p(&frames), "--s", "4", "--t", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = load_frames_dir(&inf).unwrap();
    assert_eq!(out.len(), 9);
    assert!(out.iter().all(|f| (f.height(), f.width()) == (64, 64)));

    let inf1 = root.path().join("inf_s1_t1");
    let o = run(&["--out", p(&inf1), "infer", "--checkpoint", p(&ckpt), "--frames-dir", p(&frames), "--s", "1", "--t", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = load_frames_dir(&inf1).unwrap();
    assert_eq!(out.len(), 2);
    assert!(out.iter().all(|f| (f.height(), f.width()) == (16, 16)));

    let times = root.path().join("inf_times");
    let o = run(&["--out", p(&times), "infer", "--checkpoint", p(&ckpt), "--frames-dir", p(&frames), "--s", "1.5", "--times", "0,0.3,0.9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(load_frames_dir(&times).unwrap().len(), 3);

    let o = run(&["infer", "--checkpoint", p(&ckpt), "--frames-dir", p(&frames), "--times", "0,1.3"]);
    assert_eq!(o.status.code(), Some(1));

    // Score the s = 1 output against the endpoints it interpolates between.
    let gt = root.path().join("gt");
    fs::create_dir_all(&gt).unwrap();
    let all = load_frames_dir(&frames).unwrap();
    evenhancer::dataio::save_prediction(&[all[0].clone(), all[all.len() - 1].clone()], &gt).unwrap();
    let ev = root.path().join("eval");
    let o = run(&["--out", p(&ev), "eval", "--frames-dir", p(&inf1), "--gt", p(&gt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(ev.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.contains("\"psnr_db\"")).count(), 2, "{metrics}");
    assert!(String::from_utf8(o.stdout).unwrap().contains("PSNR"));

    let prof = root.path().join("prof");
    let o = run(&["--out", p(&prof), "profile", "--frames-dir", p(&inf1), "--gt", p(&gt), "--axis", "column"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["profile.png", "profile_gt.png", "diff_0000.png", "diff_0001.png"] {
        assert!(prof.join(f).exists(), "{f}");
    }
}
