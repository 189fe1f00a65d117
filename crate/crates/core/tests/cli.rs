use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deepmil::train::Checkpoint;

fn deepmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepmil")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = deepmil(args);
    assert!(
        out.status.success(),
        "deepmil {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path, seed: &str) -> PathBuf {
    ok(&[
        "synth",
        "--bags",
        "8",
        "--k-min",
        "2",
        "--k-max",
        "3",
        "--seed",
        seed,
        "--out",
        s(dir),
    ]);
    dir.join("manifest.csv")
}

fn contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    small_dataset(&a, "7");
    small_dataset(&b, "7");
    small_dataset(&c, "8");
    let (ca, cb, cc) = (contents(&a), contents(&b), contents(&c));
    assert_eq!(ca.len(), 11, "8 images, manifest, witness table and dataset.cfg");
    assert_eq!(ca, cb);
    assert_ne!(ca, cc);
}

#[test]
fn invalid_arguments_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(
        deepmil(&["synth", "--k-min", "0", "--out", s(&out)]).status.code(),
        Some(2)
    );
    assert_eq!(
        deepmil(&["cv", "--pool", "bogus", "--out", s(&out)]).status.code(),
        Some(2)
    );
    assert_eq!(
        deepmil(&["cv", "--manifest", "missing.csv", "--out", s(&out)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(deepmil(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn two_fold_cv_writes_two_reports() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&dir.path().join("d"), "1");
    let out = dir.path().join("cv");
    let stdout = ok(&[
        "cv",
        "--manifest",
        s(&manifest),
        "--folds",
        "2",
        "--max-epochs",
        "2",
        "--jobs",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("Fold"));
    let metrics = json(&out.join("metrics.json"));
    let folds = metrics["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 2);
    let total: u64 = folds
        .iter()
        .map(|f| {
            ["tp", "fp", "tn", "fn"]
                .iter()
                .map(|k| f[k].as_u64().unwrap())
                .sum::<u64>()
        })
        .sum();
    assert_eq!(total, 8, "every bag is tested exactly once");
    for i in 0..2 {
        assert!(out.join(format!("fold{i}.ckpt")).is_file());
        assert!(out.join(format!("fold{i}.history.json")).is_file());
    }
    assert!(out.join("metrics.txt").is_file());
}

#[test]
fn eval_on_validation_split_reproduces_best_loss() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&dir.path().join("d"), "2");
    let config = dir.path().join("run.cfg");
    std::fs::write(
        &config,
        "# shared by train and eval\nfolds = 2\nmax_epochs = 3\nlearning_rate = 1e-3\n",
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let history = dir.path().join("h.json");
    let base = ["--config", s(&config), "--manifest", s(&manifest)];
    ok(&[&["train"], &base[..], &["--out", s(&ckpt), "--history", s(&history)]].concat());
    let best = Checkpoint::load(&ckpt).unwrap().best_val_loss;
    let recorded = json(&history)["val_loss"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(best, recorded);

    let report = dir.path().join("val.json");
    ok(&[
        &["eval"],
        &base[..],
        &["--ckpt", s(&ckpt), "--split", "val", "--out", s(&report)],
    ]
    .concat());
    assert_eq!(json(&report)["loss"].as_f64().unwrap(), best);
}

#[test]
fn eval_threshold_moves_counts_not_auc() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&dir.path().join("d"), "3");
    let ckpt = dir.path().join("m.ckpt");
    let base = ["--manifest", s(&manifest), "--folds", "2"];
    ok(&[&["train"], &base[..], &["--max-epochs", "1", "--out", s(&ckpt)]].concat());
    let run = |threshold: &str| {
        let out = dir.path().join(format!("e{threshold}.json"));
        ok(&[
            &["eval"],
            &base[..],
            &[
                "--ckpt",
                s(&ckpt),
                "--split",
                "all",
                "--threshold",
                threshold,
                "--out",
                s(&out),
            ],
        ]
        .concat());
        json(&out)
    };
    let (low, high) = (run("0"), run("1"));
    assert_eq!(low["metrics"]["auc"], high["metrics"]["auc"]);
    // Noisy-Or clamps every bag probability into [eps, 1 - eps]
    assert_eq!(
        low["metrics"]["tp"].as_u64().unwrap() + low["metrics"]["fp"].as_u64().unwrap(),
        8
    );
    assert_eq!(
        high["metrics"]["tn"].as_u64().unwrap() + high["metrics"]["fn"].as_u64().unwrap(),
        8
    );
}

#[test]
fn roi_writes_heatmap_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let manifest = small_dataset(&data, "4");
    let ckpt = dir.path().join("m.ckpt");
    ok(&[
        "train",
        "--manifest",
        s(&manifest),
        "--folds",
        "2",
        "--max-epochs",
        "1",
        "--out",
        s(&ckpt),
    ]);
    let heat = dir.path().join("heat.png");
    ok(&[
        "roi",
        "--ckpt",
        s(&ckpt),
        "--image",
        s(&data.join("bag_0000.png")),
        "--out",
        s(&heat),
    ]);
    let img = image::open(&heat).unwrap();
    let table = std::fs::read_to_string(dir.path().join("heat.csv")).unwrap();
    let cells = table.lines().count() - 1;
    assert_eq!(img.height(), 24);
    assert_eq!(img.width() as usize, 24 * cells);
}

#[test]
fn gradcheck_command_reports_success() {
    let stdout = ok(&["gradcheck", "--points", "10"]);
    assert_eq!(
        stdout
            .lines()
            .filter(|l| l.contains("ok") || l.contains("PASS"))
            .count(),
        10,
        "{stdout}"
    );
    ok(&["gradcheck", "--ops", "lse", "--r", "100", "--points", "20"]);
    assert_eq!(deepmil(&["gradcheck", "--ops", "softmax"]).status.code(), Some(2));
}

#[test]
fn folds_command_writes_plan() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&dir.path().join("d"), "5");
    let plan = dir.path().join("plan.csv");
    ok(&["folds", "--manifest", s(&manifest), "--folds", "4", "--out", s(&plan)]);
    let text = std::fs::read_to_string(&plan).unwrap();
    assert_eq!(text.lines().next(), Some("patient,label,fold,validation_in"));
    assert_eq!(text.lines().count(), 9);
}
