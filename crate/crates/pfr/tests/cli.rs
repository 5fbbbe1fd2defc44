use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pfr::runlog;

const TINY: &str = "[trainer]\niterations = 6\nbatch_size = 2\neval_every = 4\nseed = 3\n\n[models]\nstage_channels = 4, 4, 8, 8\ndisc_channels = 4, 4, 4\n";

fn pfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfr"))
        .args(args)
        .env_remove("PFR_THREADS")
        .output()
        .expect("spawn pfr")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen-data", "--out", s(dir), "--n-train", "4", "--n-val", "2", "--size", "32", "--seed", "1"];
    args.extend_from_slice(extra);
    pfr(&args)
}

fn train(data: &Path, out: &Path, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--config", s(config), "--out", s(out)];
    args.extend_from_slice(extra);
    pfr(&args)
}

struct Fixture {
    _root: tempfile::TempDir,
    data: PathBuf,
    config: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let out = gen(&data, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let config = root.path().join("tiny.ini");
    fs::write(&config, TINY).unwrap();
    Fixture {
        root: root.path().to_path_buf(),
        _root: root,
        data,
        config,
    }
}

#[test]
fn gen_data_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = gen(&a, &[]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), s(&a.join("manifest.tsv")));
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 2 * (4 + 2));
    gen(&b, &[]);
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.tsv")).unwrap());
    for line in manifest.lines().skip(1) {
        let img = line.split('\t').nth(3).unwrap();
        assert_eq!(fs::read(a.join(img)).unwrap(), fs::read(b.join(img)).unwrap());
    }
}

#[test]
fn two_classes_give_binary_labels() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen(dir.path(), &["--classes", "2"]).status.success());
    for entry in fs::read_dir(dir.path().join("source/labels")).unwrap() {
        let (_, _, values) = pfr::pnm::read_pgm(&entry.unwrap().path()).unwrap();
        assert!(values.iter().all(|&v| v < 2));
    }
}

#[test]
fn paired_flag_shares_label_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen(dir.path(), &["--paired", "true"]).status.success());
    let a = fs::read(dir.path().join("source/labels/train_0002.pgm")).unwrap();
    let b = fs::read(dir.path().join("target/labels/train_0002.pgm")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_writes_the_run_directory() {
    let f = fixture();
    let run = f.root.join("run");
    let out = train(&f.data, &run, &f.config, &[]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(0), "{stderr}");
    assert!(stderr.contains("config: trainer.lr_seg not set, using default"), "{stderr}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("target_val_miou,"), "{stdout}");

    let rows = runlog::parse(&fs::read_to_string(run.join("runlog.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    let weights = pfr_core_weights();
    for (_, l) in &rows {
        assert!(l.identity_error(&weights) < 1e-6);
    }
    // ceil(6 / 4) = 2 checkpoints
    let ckpts: Vec<_> = fs::read_dir(&run)
        .unwrap()
        .filter_map(|e| e.unwrap().file_name().into_string().ok())
        .filter(|n| n.ends_with(".pfrc"))
        .collect();
    assert_eq!(ckpts.len(), 2, "{ckpts:?}");
    assert!(run.join("ckpt_000004.pfrc").is_file() && run.join("final.pfrc").is_file());
    for m in ["metrics_source_val.csv", "metrics_target_val.csv"] {
        assert_eq!(fs::read_to_string(run.join(m)).unwrap().lines().count(), 1 + 5 + 1);
    }
}

fn pfr_core_weights() -> pfr::pfr_core::losses::LossWeights {
    pfr::pfr_core::losses::LossWeights::default()
}

#[test]
fn source_only_total_equals_seg() {
    let f = fixture();
    let run = f.root.join("run");
    assert!(train(&f.data, &run, &f.config, &["--source-only"]).status.success());
    let rows = runlog::parse(&fs::read_to_string(run.join("runlog.csv")).unwrap()).unwrap();
    for (_, l) in rows {
        assert!((l.total - l.seg).abs() < 1e-7);
        assert!(l.pfr > 0.0 && l.adv_g > 0.0, "terms are still computed");
    }
}

#[test]
fn config_errors_name_the_line() {
    let f = fixture();
    let bad = f.root.join("bad.ini");
    fs::write(&bad, "[trainer]\niterations = 5\nwarmup = 2\n").unwrap();
    let out = train(&f.data, &f.root.join("run"), &bad, &[]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 3") && stderr.contains("warmup"), "{stderr}");
}

#[test]
fn eval_outputs_and_prediction_dumps() {
    let f = fixture();
    let run = f.root.join("run");
    assert!(train(&f.data, &run, &f.config, &[]).status.success());
    let ckpt = run.join("final.pfrc");
    let preds = f.root.join("preds");
    let out = pfr(&["eval", "--ckpt", s(&ckpt), "--data", s(&f.data), "--split", "val", "--domain", "target", "--dump-preds", s(&preds)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8_lossy(&out.stdout).to_string();
    assert_eq!(csv.lines().count() - 1, 5 + 1);
    assert_eq!(fs::read_to_string(run.join("metrics_target_val.csv")).unwrap(), csv);
    let dumped: Vec<_> = fs::read_dir(&preds).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dumped.len(), 2);
    for p in dumped {
        let (w, h, v) = pfr::pnm::read_pgm(&p).unwrap();
        assert_eq!((w, h), (32, 32));
        assert!(v.iter().all(|&c| c < 5));
    }
    let src = pfr(&["eval", "--ckpt", s(&ckpt), "--data", s(&f.data), "--domain", "source"]);
    assert_eq!(String::from_utf8_lossy(&src.stdout), fs::read_to_string(run.join("metrics_source_val.csv")).unwrap());

    fs::remove_dir_all(f.data.join("target/labels")).unwrap();
    let out = pfr(&["eval", "--ckpt", s(&ckpt), "--data", s(&f.data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no label files"));
}

#[test]
fn eval_rejects_class_mismatch() {
    let f = fixture();
    let run = f.root.join("run");
    assert!(train(&f.data, &run, &f.config, &[]).status.success());
    let other = f.root.join("three");
    assert!(gen(&other, &["--classes", "3"]).status.success());
    let out = pfr(&["eval", "--ckpt", s(&run.join("final.pfrc")), "--data", s(&other)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn training_is_blind_to_target_labels_and_deterministic() {
    let f = fixture();
    let (a, b, c) = (f.root.join("a"), f.root.join("b"), f.root.join("c"));
    assert!(train(&f.data, &a, &f.config, &[]).status.success());
    assert!(train(&f.data, &b, &f.config, &[]).status.success());
    for name in ["config.ini", "runlog.csv", "ckpt_000004.pfrc", "final.pfrc", "eval.csv", "metrics_source_val.csv", "metrics_target_val.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    fs::remove_dir_all(f.data.join("target/labels")).unwrap();
    let out = train(&f.data, &c, &f.config, &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("target validation labels missing"));
    for name in ["config.ini", "runlog.csv", "ckpt_000004.pfrc", "final.pfrc"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(c.join(name)).unwrap(), "{name}");
    }
    assert!(!c.join("metrics_target_val.csv").exists());
}

#[test]
fn gradcheck_exit_codes() {
    let ok = pfr(&["gradcheck", "--ops", "relu"]);
    assert_eq!(ok.status.code(), Some(0));
    let table = String::from_utf8_lossy(&ok.stdout);
    assert!(table.starts_with("op,shapes,coords,skipped,max_rel_err,result\nrelu,20,"), "{table}");
    assert_eq!(pfr(&["gradcheck", "--ops", "exp", "--tol", "1e-12"]).status.code(), Some(1));
    assert_eq!(pfr(&["gradcheck", "--ops", "no_such_op"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(pfr(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(pfr(&["gen-data", "--bogus"]).status.code(), Some(2));
    assert_eq!(pfr(&["eval", "--ckpt", "x", "--data", "y", "--domain", "moon"]).status.code(), Some(2));
    assert_eq!(pfr(&["gen-data", "--out", "x", "--classes", "1"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_pfr"))
        .args(["gradcheck", "--ops", "relu"])
        .env("PFR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_marks_the_best_run() {
    let f = fixture();
    let (a, b) = (f.root.join("adapted"), f.root.join("source_only"));
    assert!(train(&f.data, &a, &f.config, &[]).status.success());
    assert!(train(&f.data, &b, &f.config, &["--source-only"]).status.success());
    let csv = f.root.join("table.csv");
    let out = pfr(&["report", "--runs", s(&a), s(&b), "--out", s(&csv)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "run,iou_0,iou_1,iou_2,iou_3,iou_4,miou,best");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("adapted,") && lines[2].starts_with("source_only,"));
    assert_eq!(lines.iter().filter(|l| l.ends_with(",*")).count(), 1);
    assert_eq!(pfr(&["report", "--runs", s(&f.root.join("nope")), "--out", s(&csv)]).status.code(), Some(1));
}
