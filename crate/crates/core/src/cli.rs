//! Command-line front end.
//!
//! Settings resolve as built-in defaults, then the `--config` file (flat
//! `key = value` lines), then explicit flags. Exit codes: 0 success,
//! 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde::Serialize;

use crate::data::synth::{synth_bags, write_dataset};
use crate::data::{build_bags, Manifest, RgbBuffer, Role, SynthConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, Component, GradcheckConfig};
use crate::kv;
use crate::metrics::MetricsReport;
use crate::model::InstanceClassifierConfig;
use crate::train::{
    cross_validate, evaluate, fold_config, mean_loss, plan_folds, score_roi, train_fold, Checkpoint, CvConfig,
    TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "deepmil",
    version,
    about = "Deep multi-instance learning for patch-based image classification"
)]
pub struct Cli {
    /// Log progress per epoch (debug level).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic witness-detection dataset (PNG strips, manifest.csv, witness.csv).
    Synth(SynthArgs),
    /// Print the patient-level fold plan of a manifest.
    Folds(FoldsArgs),
    /// Train one fold and write its best checkpoint.
    Train(TrainArgs),
    /// Cross-validate: one model per fold, metrics.json and metrics.txt.
    Cv(CvArgs),
    /// Score a checkpoint on one split of a fold, or on every manifest image.
    Eval(EvalArgs),
    /// Write an instance-score heatmap and per-patch score table for one image.
    Roi(RoiArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of bags, half of them positive
    #[arg(long, default_value_t = 400)]
    bags: usize,
    /// Smallest bag size
    #[arg(long, default_value_t = 5)]
    k_min: usize,
    /// Largest bag size
    #[arg(long, default_value_t = 15)]
    k_max: usize,
    /// Probability that an instance of a positive bag is a witness
    #[arg(long, default_value_t = 0.2)]
    witness_rate: f64,
    /// Patch side in pixels
    #[arg(long, default_value_t = 24)]
    patch_size: usize,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

/// Settings shared by every command that trains or splits data. Unset flags
/// fall back to the config file, then to the defaults shown.
#[derive(Debug, Args)]
struct RunArgs {
    /// Flat key = value settings file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest CSV (path,label,patient_id)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Pooling operator [default: nor]
    #[arg(long, value_parser = ["max", "nor", "isr", "lse"])]
    pool: Option<String>,
    /// LSE sharpness [default: 10]
    #[arg(long)]
    r: Option<f64>,
    /// Probability clamp for Noisy-Or, ISR and the loss [default: 1e-7]
    #[arg(long)]
    epsilon: Option<f64>,
    /// Optimizer [default: adam]
    #[arg(long, value_parser = ["adam", "sgd_momentum"])]
    optimizer: Option<String>,
    /// Learning rate [default: 0.0001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Momentum for sgd_momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// L2 weight decay [default: 0.0005]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Epoch limit [default: 100]
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 10]
    #[arg(long)]
    patience: Option<usize>,
    /// Bags per optimizer step [default: 1]
    #[arg(long)]
    batch_bags: Option<usize>,
    /// Run seed; every random stream derives from it [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Training-time augmentation, on or off [default: on]
    #[arg(long, value_parser = ["on", "off"])]
    augment: Option<String>,
    /// Standard deviation of the stain factors [default: 0.1]
    #[arg(long)]
    stain_sigma: Option<f64>,
    /// Largest blur radius in pixels [default: 2]
    #[arg(long)]
    blur_radius_max: Option<f64>,
    /// Number of cross-validation folds [default: 4]
    #[arg(long)]
    folds: Option<usize>,
    /// Share of training patients held out for validation [default: 0.1]
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Decision threshold for accuracy, precision and recall [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,
    /// Channel level at or above which a pixel counts as white [default: 240]
    #[arg(long)]
    white_threshold: Option<u8>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        let s = |v: &Option<f64>| v.map(|x| x.to_string());
        put("manifest", self.manifest.as_ref().map(|p| p.display().to_string()));
        put("pool", self.pool.clone());
        put("r", s(&self.r));
        put("epsilon", s(&self.epsilon));
        put("optimizer", self.optimizer.clone());
        put("learning_rate", s(&self.learning_rate));
        put("momentum", s(&self.momentum));
        put("weight_decay", s(&self.weight_decay));
        put("max_epochs", self.max_epochs.map(|v| v.to_string()));
        put("patience", self.patience.map(|v| v.to_string()));
        put("batch_bags", self.batch_bags.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("augment", self.augment.clone());
        put("stain_sigma", s(&self.stain_sigma));
        put("blur_radius_max", s(&self.blur_radius_max));
        put("folds", self.folds.map(|v| v.to_string()));
        put("validation_fraction", s(&self.validation_fraction));
        put("threshold", s(&self.threshold));
        put("white_threshold", self.white_threshold.map(|v| v.to_string()));
        out
    }

    fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config file {}: {e}", p.display())))?,
            ),
            None => None,
        };
        RunConfig::resolve(file.as_deref(), &self.overrides())
    }
}

/// Training, pooling, augmentation and fold settings plus the manifest path.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub manifest: Option<PathBuf>,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "manifest" {
            self.manifest = Some(PathBuf::from(value));
            return Ok(());
        }
        if self.train.set(key, value)? || self.cv.set(key, value)? {
            return Ok(());
        }
        Err(Error::config(format!("unknown setting {key:?}")))
    }

    /// Defaults, then `file` (config-file text), then `overrides`.
    pub fn resolve(file: Option<&str>, overrides: &[(&str, String)]) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(text) = file {
            for (k, v) in kv::parse(text)? {
                config.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            config.set(k, v)?;
        }
        config.train.validate()?;
        config.cv.validate()?;
        Ok(config)
    }

    fn manifest(&self) -> Result<Manifest> {
        let path = self
            .manifest
            .as_ref()
            .ok_or_else(|| Error::config("no manifest given (--manifest or `manifest =` in the config file)"))?;
        require_file(path, "manifest")?;
        Manifest::load(path)
    }
}

#[derive(Debug, Args)]
struct FoldsArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Write the plan as CSV (patient,label,fold,validation_in) instead of printing it
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Fold whose training and validation patients are used
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch history as JSON
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Folds trained in parallel [default: 1]
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for metrics and per-fold checkpoints
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
    /// Every manifest image as one test-mode bag
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    /// Fold of the split (with --seed and --folds as used for training)
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Which bags to score
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Write metrics and per-bag probabilities as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RoiArgs {
    /// Checkpoint whose instance classifier scores the patches
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image (PNG or PPM)
    #[arg(long)]
    image: PathBuf,
    /// Heatmap PNG path
    #[arg(long)]
    out: PathBuf,
    /// Score table CSV path [default: heatmap path with .csv extension]
    #[arg(long)]
    table: Option<PathBuf>,
    /// Channel level at or above which a pixel counts as white
    #[arg(long, default_value_t = crate::data::DEFAULT_WHITE_THRESHOLD)]
    white_threshold: u8,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Components: nor, isr, lse, conv2d, maxpool2x2, affine, relu, sigmoid,
    /// dropout, bag, or the groups pooling, layers, all
    #[arg(long, default_value = "all")]
    ops: String,
    /// LSE sharpness
    #[arg(long, default_value_t = crate::pooling::DEFAULT_LSE_R)]
    r: f64,
    /// Random points per component
    #[arg(long, default_value_t = 100)]
    points: usize,
    /// Seed of the evaluation points
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let config = SynthConfig {
        num_bags: args.bags,
        k_min: args.k_min,
        k_max: args.k_max,
        witness_rate: args.witness_rate,
        patch_size: args.patch_size,
        seed: args.seed,
    };
    let data = synth_bags(&config)?;
    write_dataset(&args.out, &data)?;
    let positives = data.bags.iter().filter(|b| b.label == 1).count();
    let instances: usize = data.bags.iter().map(|b| b.len()).sum();
    let witnesses: usize = data.witness.iter().flatten().filter(|&&w| w).count();
    println!(
        "wrote {} bags ({positives} positive, {} negative), {instances} instances, {witnesses} witnesses to {}",
        data.bags.len(),
        data.bags.len() - positives,
        args.out.display()
    );
    Ok(())
}

fn cmd_folds(args: &FoldsArgs) -> Result<()> {
    let config = args.run.resolve()?;
    let manifest = config.manifest()?;
    let plan = plan_folds(&manifest, &config.cv, config.train.seed)?;
    let mut out: Box<dyn std::io::Write> = match &args.out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(["patient", "label", "fold", "validation_in"])?;
    let mut seen = std::collections::BTreeSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.patient_id.clone()) {
            continue;
        }
        let val: Vec<String> = (0..plan.k)
            .filter(|&f| plan.validation[f].contains(&e.patient_id))
            .map(|f| f.to_string())
            .collect();
        w.write_record([
            e.patient_id.clone(),
            e.label.to_string(),
            plan.assignment[&e.patient_id].to_string(),
            val.join(";"),
        ])?;
    }
    w.flush()?;
    drop(w);
    for fold in 0..plan.k {
        eprintln!(
            "fold {fold}: {} train, {} validation, {} test patients",
            plan.patients(fold, Role::Train).len(),
            plan.patients(fold, Role::Val).len(),
            plan.patients(fold, Role::Test).len()
        );
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = args.run.resolve()?;
    let manifest = config.manifest()?;
    let plan = plan_folds(&manifest, &config.cv, config.train.seed)?;
    let bags = |role| build_bags(&manifest, &plan, args.fold, role, config.cv.white_threshold);
    let (train, val) = (bags(Role::Train)?, bags(Role::Val)?);
    let classifier = InstanceClassifierConfig::default_for_patch(manifest.layout.patch_size())?;
    let fold_train = fold_config(&config.train, args.fold);
    info!(
        "training fold {} on {} bags, validating on {}, {} pooling",
        args.fold,
        train.len(),
        val.len(),
        fold_train.pooling.kind
    );
    let (checkpoint, history) = train_fold(&train, &val, &classifier, manifest.layout, &fold_train)?;
    checkpoint.save(&args.out)?;
    if let Some(p) = &args.history {
        std::fs::write(p, serde_json::to_string_pretty(&history)? + "\n")?;
    }
    println!(
        "best epoch {} of {}, validation loss {}; checkpoint written to {}",
        history.best_epoch,
        history.epochs(),
        history.best_val_loss(),
        args.out.display()
    );
    Ok(())
}

fn cmd_cv(args: &CvArgs) -> Result<()> {
    let mut config = args.run.resolve()?;
    if let Some(j) = args.jobs {
        config.set("jobs", &j.to_string())?;
        config.cv.validate()?;
    }
    let manifest = config.manifest()?;
    let report = cross_validate(&manifest, &config.cv, &config.train)?;
    report.write(&args.out)?;
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    loss: f64,
    metrics: &'a MetricsReport,
    bags: Vec<(u64, u8, f64)>,
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let config = args.run.resolve()?;
    require_file(&args.ckpt, "checkpoint")?;
    let checkpoint = Checkpoint::load(&args.ckpt)?;
    let manifest = config.manifest()?;
    if manifest.layout != checkpoint.layout {
        return Err(Error::config(format!(
            "checkpoint was trained on {} data but the manifest is {}",
            checkpoint.layout, manifest.layout
        )));
    }
    let bags = match args.split {
        Split::All => {
            let mut all = Vec::new();
            let options = crate::data::BagOptions {
                layout: manifest.layout,
                white_threshold: config.cv.white_threshold,
            };
            for (row, e) in manifest.entries.iter().enumerate() {
                let image = RgbBuffer::load(&e.path)?;
                let prov = crate::data::Provenance {
                    source: e.path.clone(),
                    patient_id: e.patient_id.clone(),
                    offset: (0, 0),
                };
                all.extend(crate::data::image_bags(
                    &image,
                    crate::data::ExtractMode::Test,
                    &options,
                    row,
                    e.label,
                    prov,
                )?);
            }
            all
        }
        split => {
            let plan = plan_folds(&manifest, &config.cv, config.train.seed)?;
            let role = match split {
                Split::Train => Role::Train,
                Split::Val => Role::Val,
                _ => Role::Test,
            };
            build_bags(&manifest, &plan, args.fold, role, config.cv.white_threshold)?
        }
    };
    let (thetas, report) = evaluate(&checkpoint, &bags, config.cv.threshold)?;
    let loss = mean_loss(&checkpoint.model, &bags)?;
    let auc = report.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    println!(
        "{} bags: loss {loss}, accuracy {:.4}, precision {:.4}, recall {:.4}, f-score {:.4}, auc {auc} (tp {} fp {} tn {} fn {})",
        bags.len(),
        report.accuracy,
        report.precision,
        report.recall,
        report.f_score,
        report.tp,
        report.fp,
        report.tn,
        report.fn_
    );
    if let Some(p) = &args.out {
        let out = EvalOutput {
            loss,
            metrics: &report,
            bags: bags.iter().zip(&thetas).map(|(b, &t)| (b.id, b.label, t)).collect(),
        };
        std::fs::write(p, serde_json::to_string_pretty(&out)? + "\n")?;
    }
    Ok(())
}

fn cmd_roi(args: &RoiArgs) -> Result<()> {
    require_file(&args.ckpt, "checkpoint")?;
    require_file(&args.image, "image")?;
    let checkpoint = Checkpoint::load(&args.ckpt)?;
    let image = RgbBuffer::load(&args.image)?;
    let map = score_roi(&checkpoint, &image, args.white_threshold, &args.image)?;
    map.save_heatmap(&args.out)?;
    let table = args.table.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    map.save_table(&table)?;
    let best = map.argmax();
    println!(
        "{}x{} patches; highest score {:.4} at row {}, col {}; heatmap {}, table {}",
        map.rows,
        map.cols,
        best.score,
        best.row,
        best.col,
        args.out.display(),
        table.display()
    );
    Ok(())
}

/// Returns whether every component passed.
fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let config = GradcheckConfig {
        components: Component::parse_list(&args.ops)?,
        points: args.points,
        seed: args.seed,
        r: args.r,
        tolerance: args.tolerance,
        ..GradcheckConfig::default()
    };
    let reports = run_gradcheck(&config)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<11} {:>4} points  max relative error {:.3e}  {}",
            r.component.name(),
            r.points,
            r.max_relative_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.component.name());
        }
    }
    if !failed.is_empty() {
        eprintln!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

/// Missing inputs are usage errors rather than runtime failures.
fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(format!("{what} {} does not exist", path.display())))
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = if cli.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();

    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Folds(a) => cmd_folds(a),
        Command::Train(a) => cmd_train(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Roi(a) => cmd_roi(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return 1,
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_defaults_file_flags() {
        let c = RunConfig::resolve(Some("learning_rate = 0.01\npool = isr\n"), &[("pool", "lse".into())]).unwrap();
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.train.pooling.kind, crate::pooling::PoolKind::Lse);
        assert_eq!(c.train.patience, 10);
        assert_eq!(c.cv.folds, 4);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(
            RunConfig::resolve(Some("learnng_rate = 1"), &[]),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::resolve(None, &[("max_epochs", "0".into())]).is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["deepmil", "cv", "--pool", "bogus", "--out", "x"]), 2);
        assert_eq!(run(["deepmil", "nonsense"]), 2);
        assert_eq!(run(["deepmil", "synth", "--k-min", "0", "--out", "/nonexistent/x"]), 2);
        assert_eq!(run(["deepmil", "gradcheck", "--ops", "softmax"]), 2);
        assert_eq!(run(["deepmil", "train", "--out", "x.ckpt"]), 2);
    }

    #[test]
    fn help_lists_defaults() {
        use clap::CommandFactory;
        let mut cmd = Cli::command();
        let help = cmd.find_subcommand_mut("cv").unwrap().render_long_help().to_string();
        for needle in [
            "--learning-rate",
            "[default: 0.0001]",
            "--pool",
            "[default: nor]",
            "--jobs",
        ] {
            assert!(help.contains(needle), "{needle} missing from:\n{help}");
        }
    }
}
