//! Subcommands of the `ofkit` binary.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use ofkit::config::RunConfig;
use ofkit::data::dataset::write_synthetic;
use ofkit::data::{Dataset, Image, LabelMap};
use ofkit::eval::{
    export_pr_curve, read_detections_jsonl, save_detections_jsonl, DetectionRecord, EvalReport, Protocol,
};
use ofkit::inference::{detections_for_image, evaluate_detections, predict_dataset};
use ofkit::model::Model;
use ofkit::train::{load_samples, train, LogEntry, TrainOptions};
use ofkit::verify::{run_suite, SuiteReport, SUITES};
use ofkit::Error;

pub const SEED_ENV: &str = "OFKIT_SEED";
pub const CHECKPOINT_FILE: &str = "model.ofk";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const DUMP_FILE: &str = "divergence.json";
pub const REPORT_FILE: &str = "report.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";

pub const EXIT_OK: i32 = 0;
pub const EXIT_DIVERGED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ofkit", version, about = "Oriented object detection decoder toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a detector and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Score a checkpoint or a detection dump against an annotated dataset.
    Eval(EvalArgs),
    /// Run a checkpoint over an image or a dataset directory.
    Infer(InferArgs),
    /// Run verification suites; exits with 4 when any check fails.
    Verify(VerifyArgs),
    /// Render a synthetic dataset in DOTA layout.
    SynthData(SynthArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in profile used when no file is given.
    #[arg(long, default_value = "toy")]
    pub profile: String,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    /// File or profile, then `OFKIT_SEED`, then `--seed`.
    pub fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::profile(&self.profile)?,
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{} must be an unsigned integer, got {:?}", SEED_ENV, v)))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory; overrides `output`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stop after this many iterations.
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint to run over the dataset.
    #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines detections, e.g. from `infer`.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Annotated dataset; defaults to the configured test split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for the report and PR curves.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub protocol: Option<Protocol>,
    #[arg(long)]
    pub max_detections: Option<usize>,
    /// Spread images over threads.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A PPM/PGM/raw image, or a dataset directory with `images/`.
    #[arg(long)]
    pub input: PathBuf,
    /// JSON-lines output; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Class names, one per line.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub max_detections: usize,
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct VerifyArgs {
    /// Suite name or `all`.
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Root for `train/` and `test/`; defaults to the configured paths.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub train_count: Option<u64>,
    #[arg(long)]
    pub test_count: Option<u64>,
}

/// Error plus the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
            Error::Diverged { .. } | Error::NumericOverflow { .. } | Error::Backward(_) => EXIT_DIVERGED,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| EXIT_OK),
        Command::Eval(a) => cmd_eval(&a).map(|_| EXIT_OK),
        Command::Infer(a) => cmd_infer(&a).map(|_| EXIT_OK),
        Command::Verify(a) => cmd_verify(&a).map(|ok| if ok { EXIT_OK } else { EXIT_VERIFY }),
        Command::SynthData(a) => cmd_synth_data(&a).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Where `train` put its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub iterations: usize,
    pub final_loss: f64,
}

pub fn cmd_train(a: &TrainArgs) -> CmdResult<TrainOutcome> {
    let mut cfg = a.config.resolve()?;
    if let Some(o) = &a.output {
        cfg.output = o.clone();
    }
    if let Some(d) = &a.train_data {
        cfg.data.train = d.clone();
    }
    if let Some(e) = a.epochs {
        cfg.optim.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.optim.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.optim.batch_size = b;
    }
    cfg.validate()?;
    let ds = Dataset::load(&cfg.data.train, None)?;
    if ds.labels.len() > cfg.model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model predicts {}",
            ds.labels.len(),
            cfg.model.classes
        ))
        .into());
    }
    let samples = load_samples(&ds)?;
    info!("training on {} images from {}", samples.len(), cfg.data.train.display());
    create_dir(&cfg.output)?;
    let resolved = cfg.output.join("config.toml");
    fs::write(&resolved, cfg.to_toml_string()?).map_err(|e| io_failure(&resolved, e))?;
    let log_path = cfg.output.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let opts = TrainOptions {
        dump: Some(cfg.output.join(DUMP_FILE)),
        max_iterations: a.max_iterations,
    };
    let mut write_entry = |e: &LogEntry, _: &Model| -> ofkit::Result<()> {
        let line = serde_json::to_string(e).map_err(|err| Error::InvalidArgument(err.to_string()))?;
        writeln!(log, "{}", line).map_err(|err| Error::io(&log_path, err))
    };
    let summary = train(&mut model, &samples, &cfg, &opts, &mut write_entry)?;
    let checkpoint = cfg.output.join(CHECKPOINT_FILE);
    model.save(&checkpoint)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": checkpoint,
            "iterations": summary.iterations,
            "final_loss": summary.final_loss,
        })
    );
    Ok(TrainOutcome {
        checkpoint,
        log: cfg.output.join(LOG_FILE),
        iterations: summary.iterations,
        final_loss: summary.final_loss,
    })
}

fn pr_export(report: &EvalReport, threshold: f64, path: &Path) -> CmdResult {
    let mut part = report.clone();
    part.curves.retain(|c| (c.threshold - threshold).abs() < 1e-12);
    export_pr_curve(&part, path)?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> CmdResult<EvalReport> {
    let cfg = a.config.resolve()?;
    let data = a.data.clone().unwrap_or(cfg.data.test.clone());
    let ds = Dataset::load(&data, None)?;
    let protocol = a.protocol.unwrap_or(cfg.eval.protocol);
    let detections = match (&a.checkpoint, &a.detections) {
        (Some(ck), _) => {
            let model = Model::load(ck)?;
            check_labels(&ds.labels, &model)?;
            predict_dataset(
                &model,
                &ds,
                a.max_detections.unwrap_or(cfg.eval.max_detections),
                a.parallel,
            )?
        }
        (None, Some(path)) => read_detections_jsonl(path)?
            .iter()
            .map(|r| r.to_detection(&ds.labels))
            .collect::<ofkit::Result<Vec<_>>>()?,
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --detections".into()).into()),
    };
    let report = evaluate_detections(&detections, &ds, protocol)?;
    let out = a.output.clone().unwrap_or(cfg.output.join("eval"));
    create_dir(&out)?;
    let report_path = out.join(REPORT_FILE);
    let json = serde_json::to_vec_pretty(&report).map_err(|e| Failure {
        code: EXIT_DATA,
        message: e.to_string(),
    })?;
    fs::write(&report_path, json).map_err(|e| io_failure(&report_path, e))?;
    pr_export(&report, 0.5, &out.join("pr_iou50.csv"))?;
    pr_export(&report, 0.75, &out.join("pr_iou75.csv"))?;
    println!(
        "{}",
        serde_json::json!({
            "report": report_path,
            "images": ds.len(),
            "detections": detections.len(),
            "AP50": report.ap50,
            "AP75": report.ap75,
            "AP50:95": report.ap50_95,
        })
    );
    Ok(report)
}

fn check_labels(labels: &LabelMap, model: &Model) -> CmdResult {
    if labels.len() > model.cfg.classes {
        return Err(Error::Checkpoint(format!(
            "{} dataset classes but the checkpoint predicts {}",
            labels.len(),
            model.cfg.classes
        ))
        .into());
    }
    Ok(())
}

/// Label names for `infer`: the flag, a `classes.txt` beside the input, or
/// numbered names.
fn infer_labels(a: &InferArgs, model: &Model) -> CmdResult<LabelMap> {
    if let Some(p) = &a.labels {
        return Ok(LabelMap::read(p)?);
    }
    let near = [Some(a.input.as_path()), a.input.parent().and_then(Path::parent)];
    for dir in near.into_iter().flatten() {
        let candidate = dir.join("classes.txt");
        if candidate.is_file() {
            return Ok(LabelMap::read(&candidate)?);
        }
    }
    Ok(LabelMap::numbered(model.cfg.classes))
}

pub fn cmd_infer(a: &InferArgs) -> CmdResult<Vec<DetectionRecord>> {
    let model = Model::load(&a.checkpoint)?;
    let labels = infer_labels(a, &model)?;
    if labels.len() < model.cfg.classes {
        return Err(Error::Checkpoint(format!(
            "{} label names for a {}-class checkpoint",
            labels.len(),
            model.cfg.classes
        ))
        .into());
    }
    let detections = if a.input.is_dir() {
        let ds = Dataset::load(&a.input, Some(labels.clone()))?;
        predict_dataset(&model, &ds, a.max_detections, a.parallel)?
    } else {
        let img = Image::read(&a.input)?;
        let id = a
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        detections_for_image(&model, &id, &img.to_tensor(), a.max_detections)?
    };
    let records = detections
        .iter()
        .map(|d| DetectionRecord::from_detection(d, &labels))
        .collect::<ofkit::Result<Vec<_>>>()?;
    match &a.output {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            save_detections_jsonl(&records, p)?;
            info!("{} detections written to {}", records.len(), p.display());
        }
        None => {
            let stdout = std::io::stdout();
            ofkit::eval::write_detections_jsonl(&records, &mut stdout.lock())?;
        }
    }
    Ok(records)
}

/// Returns whether every requested suite passed.
pub fn cmd_verify(a: &VerifyArgs) -> CmdResult<bool> {
    let names: Vec<&str> = if a.suite == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&a.suite.as_str()) {
        vec![a.suite.as_str()]
    } else {
        return Err(Error::InvalidArgument(format!(
            "unknown suite '{}'; expected all or one of {}",
            a.suite,
            SUITES.join(", ")
        ))
        .into());
    };
    let mut reports: Vec<SuiteReport> = Vec::with_capacity(names.len());
    for name in names {
        let r = run_suite(name, a.seed)?;
        eprintln!("{}", r.summary());
        reports.push(r);
    }
    let passed = reports.iter().all(SuiteReport::passed);
    let doc = serde_json::json!({ "passed": passed, "suites": reports });
    match &a.output {
        Some(p) => {
            let text = serde_json::to_string_pretty(&doc).expect("plain data");
            fs::write(p, text).map_err(|e| io_failure(p, e))?;
        }
        None => println!("{}", doc),
    }
    Ok(passed)
}

/// Paths of the two generated splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutcome {
    pub train: PathBuf,
    pub test: PathBuf,
    pub truncated: usize,
}

/// Training scenes use indices `0..train`, test scenes the following ones.
pub fn cmd_synth_data(a: &SynthArgs) -> CmdResult<SynthOutcome> {
    let cfg = a.config.resolve()?;
    cfg.validate()?;
    let (train_dir, test_dir) = match &a.output {
        Some(root) => (root.join("train"), root.join("test")),
        None => (cfg.data.train.clone(), cfg.data.test.clone()),
    };
    let n_train = a.train_count.unwrap_or(cfg.data.synth_train);
    let n_test = a.test_count.unwrap_or(cfg.data.synth_test);
    let mut truncated = write_synthetic(&train_dir, &cfg.data.synth, cfg.seed, 0, n_train)?;
    truncated += write_synthetic(&test_dir, &cfg.data.synth, cfg.seed, n_train, n_test)?;
    if truncated > 0 {
        warn!(
            "{} scenes hold fewer objects than drawn: placement budget exhausted",
            truncated
        );
    }
    println!(
        "{}",
        serde_json::json!({
            "train": train_dir,
            "test": test_dir,
            "train_images": n_train,
            "test_images": n_test,
            "truncated": truncated,
        })
    );
    Ok(SynthOutcome {
        train: train_dir,
        test: test_dir,
        truncated,
    })
}
