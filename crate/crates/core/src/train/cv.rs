use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::fit::{evaluate, train_fold, TrainHistory};
use crate::data::{build_bags, make_folds, FoldPlan, Manifest, Role, DEFAULT_WHITE_THRESHOLD};
use crate::error::{Error, Result};
use crate::kv::parse_value;
use crate::metrics::{MetricsReport, DEFAULT_THRESHOLD};
use crate::model::InstanceClassifierConfig;
use crate::numerics::{Purpose, StreamKey};

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub folds: usize,
    /// Share of each fold's training patients held out for validation.
    pub validation_fraction: f64,
    pub threshold: f64,
    pub white_threshold: u8,
    /// Folds trained concurrently; results are merged in fold order.
    pub jobs: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 4,
            validation_fraction: 0.1,
            threshold: DEFAULT_THRESHOLD,
            white_threshold: DEFAULT_WHITE_THRESHOLD,
            jobs: 1,
        }
    }
}

impl CvConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "folds" => self.folds = parse_value(key, value)?,
            "validation_fraction" => self.validation_fraction = parse_value(key, value)?,
            "threshold" => self.threshold = parse_value(key, value)?,
            "white_threshold" => self.white_threshold = parse_value(key, value)?,
            "jobs" => self.jobs = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.validation_fraction == 0.0 {
            return Err(Error::config(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        if self.jobs < 1 {
            return Err(Error::config("jobs must be >= 1"));
        }
        Ok(())
    }
}

/// Fold plan of a run: shared by `cv`, `folds` and `train`.
pub fn plan_folds(manifest: &Manifest, cv: &CvConfig, seed: u64) -> Result<FoldPlan> {
    make_folds(
        &manifest.entries,
        cv.folds,
        cv.validation_fraction,
        StreamKey::new(seed).purpose(Purpose::Folds),
    )
}

/// Training configuration of one fold: the run seed xor the fold index.
pub fn fold_config(config: &TrainConfig, fold: usize) -> TrainConfig {
    TrainConfig {
        seed: config.seed ^ fold as u64,
        ..config.clone()
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub report: MetricsReport,
    pub thetas: Vec<f64>,
    pub bag_ids: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// Mean over the folds whose test split has both classes.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub folds: Vec<FoldOutcome>,
    pub mean: MeanMetrics,
}

fn mean_of(reports: &[&MetricsReport]) -> MeanMetrics {
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
    MeanMetrics {
        accuracy: avg(|r| r.accuracy),
        precision: avg(|r| r.precision),
        recall: avg(|r| r.recall),
        f_score: avg(|r| r.f_score),
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
    }
}

pub fn run_fold(
    manifest: &Manifest,
    plan: &FoldPlan,
    fold: usize,
    cv: &CvConfig,
    config: &TrainConfig,
) -> Result<FoldOutcome> {
    let bags = |role| build_bags(manifest, plan, fold, role, cv.white_threshold);
    let (train, val, test) = (bags(Role::Train)?, bags(Role::Val)?, bags(Role::Test)?);
    info!(
        "fold {fold}: {} train, {} validation, {} test bags",
        train.len(),
        val.len(),
        test.len()
    );
    let classifier = InstanceClassifierConfig::default_for_patch(manifest.layout.patch_size())?;
    let (checkpoint, history) = train_fold(&train, &val, &classifier, manifest.layout, &fold_config(config, fold))?;
    let (thetas, report) = evaluate(&checkpoint, &test, cv.threshold)?;
    info!(
        "fold {fold}: best epoch {} of {}, test accuracy {:.4}, auc {:?}",
        history.best_epoch,
        history.epochs(),
        report.accuracy,
        report.auc
    );
    Ok(FoldOutcome {
        fold,
        checkpoint,
        history,
        report,
        thetas,
        bag_ids: test.iter().map(|b| b.id).collect(),
    })
}

/// Trains and tests one model per fold. Any failing fold aborts the run with
/// its index.
pub fn cross_validate(manifest: &Manifest, cv: &CvConfig, config: &TrainConfig) -> Result<CvReport> {
    cv.validate()?;
    config.validate()?;
    let plan = plan_folds(manifest, cv, config.seed)?;
    let slots: Mutex<Vec<Option<Result<FoldOutcome>>>> = Mutex::new((0..cv.folds).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let fold = next.fetch_add(1, Ordering::SeqCst);
        if fold >= cv.folds {
            break;
        }
        let outcome = run_fold(manifest, &plan, fold, cv, config);
        let failed = outcome.is_err();
        slots.lock().expect("no worker panicked")[fold] = Some(outcome);
        if failed {
            // stop handing out further folds
            next.store(cv.folds, Ordering::SeqCst);
        }
    };
    std::thread::scope(|s| {
        for _ in 1..cv.jobs.min(cv.folds) {
            s.spawn(worker);
        }
        worker();
    });

    let mut folds = Vec::with_capacity(cv.folds);
    for (fold, slot) in slots.into_inner().expect("no worker panicked").into_iter().enumerate() {
        match slot {
            Some(Ok(o)) => folds.push(o),
            Some(Err(e)) => {
                return Err(Error::Fold {
                    fold,
                    source: Box::new(e),
                })
            }
            None => {}
        }
    }
    let reports: Vec<&MetricsReport> = folds.iter().map(|f| &f.report).collect();
    let mean = mean_of(&reports);
    Ok(CvReport { folds, mean })
}

#[derive(Serialize)]
struct FoldJson<'a> {
    fold: usize,
    accuracy: f64,
    precision: f64,
    recall: f64,
    f_score: f64,
    auc: Option<f64>,
    tp: usize,
    fp: usize,
    tn: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    threshold: f64,
    best_epoch: usize,
    epochs: usize,
    undefined: &'a crate::metrics::UndefinedRatios,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    folds: Vec<FoldJson<'a>>,
    mean: &'a MeanMetrics,
}

impl CvReport {
    pub fn to_json(&self) -> Result<String> {
        let folds = self
            .folds
            .iter()
            .map(|f| FoldJson {
                fold: f.fold,
                accuracy: f.report.accuracy,
                precision: f.report.precision,
                recall: f.report.recall,
                f_score: f.report.f_score,
                auc: f.report.auc,
                tp: f.report.tp,
                fp: f.report.fp,
                tn: f.report.tn,
                fn_: f.report.fn_,
                threshold: f.report.threshold,
                best_epoch: f.history.best_epoch,
                epochs: f.history.epochs(),
                undefined: &f.report.undefined,
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&ReportJson {
            folds,
            mean: &self.mean,
        })?;
        s.push('\n');
        Ok(s)
    }

    /// Aligned table with columns Accuracy, Precision, Recall, F-score, AUC.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        let mut out = format!(
            "{:<6}{:>10}{:>11}{:>8}{:>9}{:>7}\n",
            "Fold", "Accuracy", "Precision", "Recall", "F-score", "AUC"
        );
        let mut row = |name: String, a: f64, p: f64, r: f64, f: f64, auc: Option<f64>| {
            let _ = writeln!(
                out,
                "{name:<6}{:>10}{:>11}{:>8}{:>9}{:>7}",
                cell(Some(a)),
                cell(Some(p)),
                cell(Some(r)),
                cell(Some(f)),
                cell(auc)
            );
        };
        for f in &self.folds {
            let r = &f.report;
            row(f.fold.to_string(), r.accuracy, r.precision, r.recall, r.f_score, r.auc);
        }
        let m = &self.mean;
        row("mean".into(), m.accuracy, m.precision, m.recall, m.f_score, m.auc);
        out
    }

    /// `metrics.json`, `metrics.txt`, and per fold `fold{i}.ckpt` and `fold{i}.history.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), self.to_json()?)?;
        std::fs::write(dir.join("metrics.txt"), self.to_table())?;
        for f in &self.folds {
            f.checkpoint.save(&dir.join(format!("fold{}.ckpt", f.fold)))?;
            std::fs::write(
                dir.join(format!("fold{}.history.json", f.fold)),
                serde_json::to_string_pretty(&f.history)? + "\n",
            )?;
        }
        Ok(())
    }
}
