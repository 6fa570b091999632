use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_embedhead"));
    c.env("EMBEDHEAD_THREADS", "1");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CONFIG: &str = r#"{
  "dataset": {"manifest": "data/manifest.json", "seed": 3},
  "model": {"hidden_dim": 32},
  "train": {"epochs": 3, "batch_size": 64, "lr": 0.001, "seed": 3}
}"#;

/// synth + prepare + train both folds in `dir`.
fn pipeline(dir: &Path) {
    let o = run(dir, &["synth", "--out", "data", "--set", "n_samples=1200", "--set", "dim=16", "--set", "seed=3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::write(dir.join("cfg.json"), CONFIG).unwrap();
    let o = run(dir, &["prepare", "--config", "cfg.json", "--out", "prep"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(dir, &["train", "--config", "cfg.json", "--prepared", "prep", "--out", "run", "--fold", "all"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn all_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_outputs_are_complete_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["data/train.emb", "data/val.csv", "prep/split.json", "prep/catalog.json", "prep/schema.json", "prep/resolved_config.json"] {
        assert!(a.path().join(f).is_file(), "{f}");
    }
    // top_k = 2 per fold
    for f in ["fold0-top1.ckpt", "fold0-top2.ckpt", "fold1-top1.ckpt", "fold1-top2.ckpt"] {
        assert!(a.path().join("run").join(f).is_file(), "{f}");
    }
    let history = fs::read_to_string(a.path().join("run/fold0-history.csv")).unwrap();
    let first = history.lines().next().unwrap();
    assert!(first.starts_with("# resolved_config {"));
    // defaults are materialized in the echo
    assert!(first.contains("\"rank_metric\":\"track3\""), "{first}");
    assert_eq!(history.lines().filter(|l| !l.starts_with('#')).count(), 4);
    assert_eq!(all_files(a.path()), all_files(b.path()));
}

#[test]
fn evaluate_and_predict() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    pipeline(dir);
    let o = run(dir, &["evaluate", "--prepared", "prep", "--config", "cfg.json", "--out", "one.json", "--per-class", "pc.csv", "run/fold0-top1.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(
        dir,
        &["evaluate", "--prepared", "prep", "--config", "cfg.json", "--out", "same.json", "run/fold0-top1.ckpt", "run/fold0-top1.ckpt", "run/fold0-top1.ckpt"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let one: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("one.json")).unwrap()).unwrap();
    let same: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("same.json")).unwrap()).unwrap();
    for k in ["track1", "track2", "track3", "accuracy", "top3", "macro_f1", "psc_rate", "esc_rate", "n_samples"] {
        assert_eq!(one[k], same[k], "{k}");
    }
    assert_eq!(same["n_models"], 3);
    let t = |k: &str| one[k].as_f64().unwrap();
    assert_eq!(t("track3"), t("track1") + t("track2"));
    assert_eq!(t("track1"), 1.0 - t("accuracy"));
    assert_eq!(one["costs"]["cost_poisonous_as_edible"], 100.0);
    assert!(one["resolved_config"]["model"]["hidden_dim"] == 32);
    let pc = fs::read_to_string(dir.join("pc.csv")).unwrap();
    assert_eq!(pc.lines().nth(1), Some("class,support,precision,recall,f1"));

    // embedded config is used when --config is absent
    let o = run(dir, &["evaluate", "--prepared", "prep", "--out", "embedded.json", "run/fold0-top1.ckpt", "run/fold1-top1.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = run(dir, &["predict", "--prepared", "prep", "--out", "p1.csv", "--pool", "val", "run/fold0-top1.ckpt", "run/fold1-top1.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("per image"), "{}", stderr(&o));
    let o = run(dir, &["predict", "--prepared", "prep", "--out", "p2.csv", "--pool", "val", "run/fold0-top1.ckpt", "run/fold1-top1.ckpt"]);
    assert_eq!(code(&o), 0);
    let p1 = fs::read(dir.join("p1.csv")).unwrap();
    assert_eq!(p1, fs::read(dir.join("p2.csv")).unwrap());
    let text = String::from_utf8(p1).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next(), Some("observation_id,predicted_class_index,predicted_species,poison_probability,top3"));
    let rows: Vec<&str> = lines.collect();
    let val_rows = fs::read_to_string(dir.join("data/val.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows.len(), val_rows);
    let fields: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(fields.len(), 5);
    let p: f64 = fields[3].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(fields[4].split(' ').count(), 3);
}

#[test]
fn mismatched_checkpoints_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    pipeline(dir);
    let o = run(dir, &["train", "--config", "cfg.json", "--prepared", "prep", "--out", "wide", "--fold", "0", "--set", "model.hidden_dim=48"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(dir, &["evaluate", "--prepared", "prep", "--config", "cfg.json", "--out", "x.json", "run/fold0-top1.ckpt", "wide/fold0-top1.ckpt"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("hidden_dim"), "{}", stderr(&o));

    // a catalog with a different class count
    let other = tempfile::tempdir().unwrap();
    let o = run(other.path(), &["synth", "--out", "data", "--set", "n_samples=600", "--set", "dim=16", "--set", "n_classes=4"]);
    assert_eq!(code(&o), 0);
    fs::write(other.path().join("cfg.json"), CONFIG).unwrap();
    assert_eq!(code(&run(other.path(), &["prepare", "--config", "cfg.json", "--out", "prep"])), 0);
    let ckpt = dir.join("run/fold0-top1.ckpt");
    let o = run(other.path(), &["evaluate", "--prepared", "prep", "--config", "cfg.json", "--out", "x.json", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_classes"), "{}", stderr(&o));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let o = run(dir, &["prepare", "--set", "dataset.manifest=missing.json", "--out", "p"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("manifest not found"), "{}", stderr(&o));
    assert_eq!(code(&run(dir, &["frobnicate"])), 2);
    assert_eq!(code(&run(dir, &["--help"])), 0);
    let o = run(dir, &["synth", "--out", "d", "--set", "n_clases=3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_clases"), "{}", stderr(&o));
    fs::write(dir.join("bad.json"), "{\"train\": {\"lr\": -1}}").unwrap();
    let o = run(dir, &["prepare", "--config", "bad.json", "--out", "p"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.lr"), "{}", stderr(&o));
    let o = run(dir, &["train", "--prepared", "nowhere", "--out", "r"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn huge_learning_rate_aborts_naming_the_epoch() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    pipeline(dir);
    let o = run(
        dir,
        &["train", "--config", "cfg.json", "--prepared", "prep", "--out", "nan", "--fold", "0", "--set", "train.lr=1e3", "--set", "train.grad_clip=0"],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("diverged at epoch"), "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_every_component() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    for name in ["op/matmul", "op/attention", "op/layer_norm", "head/mlp", "head/fusion", "loss/focal", "loss/seesaw", "loss/composite_mlp"] {
        assert!(out.lines().any(|l| l.starts_with(name) && l.ends_with("ok")), "{name}\n{out}");
    }
    let o = run(d.path(), &["gradcheck", "--seeds", "1", "--include-corrupted"]);
    assert_eq!(code(&o), 1);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().any(|l| l.starts_with("corrupted/sin") && l.ends_with("FAIL")), "{out}");
}

#[test]
fn synth_is_byte_stable_and_long_tailed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["synth", "--out", "d", "--set", "n_samples=5000", "--set", "imbalance_exponent=1.5", "--set", "dim=8"];
    assert_eq!(code(&run(a.path(), &args)), 0);
    assert_eq!(code(&run(b.path(), &args)), 0);
    assert_eq!(all_files(a.path()), all_files(b.path()));
    let csv = fs::read_to_string(a.path().join("d/train.csv")).unwrap();
    let mut counts = std::collections::BTreeMap::new();
    for line in csv.lines().skip(1) {
        let species = line.split(',').nth(1).unwrap().to_owned();
        *counts.entry(species).or_insert(0usize) += 1;
    }
    let (max, min) = (counts.values().max().unwrap(), counts.values().min().unwrap());
    assert!(*max >= 20 * *min, "{counts:?}");
}
