//! The `xrnet` commands: split, train, eval, predict, gradcheck and synth.
//!
//! Every command except `predict` reads a JSON [`RunConfig`]. Artifacts go
//! to `output_dir` (and the checkpoint path, when one is named); logs go to
//! standard error.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
use crate::data::{
    class_dirs, collate, list_images, load_image, load_samples, manifest_entries, read_manifest,
    stratified_split_indices, write_manifest, ManifestEntry, Sample, SplitSide, SplitSpec,
};
use crate::error::{Error, Result};
use crate::gradcheck::{self, Fault, GradcheckOptions};
use crate::metrics::{classification_report, confusion_matrix, render_report, ReportFormat};
use crate::model::{Model, ModelConfig};
use crate::synthetic::{write_png_dataset, SyntheticSpec};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};

pub const MANIFEST_FILE: &str = "split_manifest.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const TRACE_FILE: &str = "shape_trace.txt";
pub const CHECKPOINT_FILE: &str = "model.cxr";
pub const REPORT_STEM: &str = "report";
pub const HEATMAP_FILE: &str = "confusion_matrix.svg";

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const ARTIFACT: i32 = 4;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => exit::NUMERIC,
        Error::Checkpoint(_) | Error::Manifest(_) => exit::ARTIFACT,
        Error::Config(_) | Error::Data(_) | Error::Layout(_) | Error::Usage(_) | Error::Io { .. } => exit::USAGE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory with exactly two class subdirectories of PNG/JPEG files.
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    /// Defaults to `output_dir/model.cxr`.
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.model.shape_trace()?;
        self.train.validate()
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join(CHECKPOINT_FILE))
    }

    pub fn manifest(&self) -> PathBuf {
        self.output_dir.join(MANIFEST_FILE)
    }

    fn ensure_output_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))
    }
}

#[derive(Debug, Parser)]
#[command(name = "xrnet", version, about = "Train and evaluate a small CNN for binary chest X-ray classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Freeze a stratified train/test split into output_dir/split_manifest.csv.
    Split(ConfigArgs),
    /// Train on the train side and write the checkpoint, history and shape trace.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the test side and write the reports.
    Eval(ConfigArgs),
    /// Classify individual images with a trained checkpoint.
    Predict(PredictArgs),
    /// Check every backward pass against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a seeded blob-versus-stripes PNG dataset for smoke runs.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint to load; defaults to the one named by --config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FaultArg {
    DenseBackward,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Optional run configuration; its train.seed seeds the check.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Corrupt a backward pass on purpose to confirm the check notices.
    #[arg(long, hide = true, value_enum)]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory to create the two class folders in.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split(a) => {
            print!("{}", cmd_split(&RunConfig::load(&a.config)?)?);
            Ok(())
        }
        Command::Train(a) => cmd_train(&RunConfig::load(&a.config)?),
        Command::Eval(a) => {
            print!("{}", cmd_eval(&RunConfig::load(&a.config)?)?);
            Ok(())
        }
        Command::Predict(a) => cmd_predict(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

/// Result of a split: class names and the frozen manifest records.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSummary {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl SplitSummary {
    pub fn count(&self, class: Option<usize>, side: SplitSide) -> usize {
        self.entries
            .iter()
            .filter(|e| e.split == side && class.is_none_or(|c| e.label == c))
            .count()
    }
}

/// `train=N test=M`, then one line per class.
impl fmt::Display for SplitSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "train={} test={}",
            self.count(None, SplitSide::Train),
            self.count(None, SplitSide::Test)
        )?;
        for (c, name) in self.class_names.iter().enumerate() {
            writeln!(
                f,
                "{name}: train={} test={}",
                self.count(Some(c), SplitSide::Train),
                self.count(Some(c), SplitSide::Test)
            )?;
        }
        Ok(())
    }
}

/// Splits `data_root` and writes the manifest.
pub fn cmd_split(cfg: &RunConfig) -> Result<SplitSummary> {
    let (class_names, files) = list_images(&cfg.data_root)?;
    let labels: Vec<usize> = files.iter().map(|(_, l)| *l).collect();
    let split = stratified_split_indices(&labels, class_names.len(), &cfg.split)?;
    let entries = manifest_entries(&files, &split);
    cfg.ensure_output_dir()?;
    write_manifest(&cfg.manifest(), &entries)?;
    info!("wrote {}", cfg.manifest().display());
    Ok(SplitSummary { class_names, entries })
}

/// The frozen split if one exists, otherwise a fresh one.
fn split_entries(cfg: &RunConfig) -> Result<(Vec<String>, Vec<ManifestEntry>)> {
    let class_names: Vec<String> = class_dirs(&cfg.data_root)?.into_iter().map(|(n, _)| n).collect();
    let path = cfg.manifest();
    if path.exists() {
        info!("using frozen split {}", path.display());
        let entries = read_manifest(&path)?;
        if let Some(e) = entries.iter().find(|e| e.label >= class_names.len()) {
            return Err(Error::Manifest(format!(
                "{}: label {} of {} exceeds the {} classes",
                path.display(),
                e.label,
                e.path.display(),
                class_names.len()
            )));
        }
        Ok((class_names, entries))
    } else {
        let s = cmd_split(cfg)?;
        info!("{}", s.to_string().trim_end().replace('\n', "; "));
        Ok((s.class_names, s.entries))
    }
}

fn load_side(entries: &[ManifestEntry], side: SplitSide, size: usize) -> Result<Vec<Sample>> {
    let files: Vec<(PathBuf, usize)> = entries
        .iter()
        .filter(|e| e.split == side)
        .map(|e| (e.path.clone(), e.label))
        .collect();
    let (samples, skipped) = load_samples(&files, size);
    if skipped > 0 {
        warn!("{skipped} of {} {side:?} images could not be decoded", files.len());
    }
    if samples.is_empty() {
        return Err(Error::data(format!("no usable {side:?} images")));
    }
    Ok(samples)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (class_names, entries) = split_entries(cfg)?;
    let checkpoint = cfg.checkpoint();
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut model_cfg = cfg.model.clone();
    if !model_cfg.class_names.is_empty() && model_cfg.class_names != class_names {
        warn!(
            "class names {:?} replaced by directory names {:?}",
            model_cfg.class_names, class_names
        );
    }
    model_cfg.class_names = class_names;

    let samples = load_side(&entries, SplitSide::Train, model_cfg.input_size)?;
    let mut model = Model::<f32>::build(&model_cfg)?;
    write_file(&cfg.output_dir.join(TRACE_FILE), model.trace().to_string())?;
    info!(
        "training on {} images, {} parameters, {} epochs",
        samples.len(),
        model.num_parameters(),
        cfg.train.epochs
    );
    let history = train(&mut model, &samples, &cfg.train)?;
    history.write_csv(&cfg.output_dir.join(HISTORY_FILE))?;
    save_checkpoint(&model, &checkpoint)?;
    info!("wrote {}", checkpoint.display());
    Ok(())
}

fn predict_classes(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, _) = collate(samples, chunk)?;
        out.extend(model.predict(&images)?.classes);
    }
    Ok(out)
}

/// Writes the report files and returns the text report.
pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let model = load_checkpoint_expecting(&cfg.checkpoint(), &cfg.model)?;
    let (class_names, entries) = split_entries(cfg)?;
    let samples = load_side(&entries, SplitSide::Test, model.config().input_size)?;
    let y_true: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let y_pred = predict_classes(&model, &samples, cfg.train.batch_size)?;
    let k = model.config().num_classes;
    let names: Vec<String> = if model.config().class_names.len() == k {
        model.config().class_names.clone()
    } else {
        class_names
    };
    let cm = confusion_matrix(&y_true, &y_pred, k)?.with_class_names(names)?;
    let report = classification_report(&cm)?;
    for format in [ReportFormat::Csv, ReportFormat::Text] {
        let path = cfg.output_dir.join(format!("{REPORT_STEM}.{}", format.extension()));
        write_file(&path, render_report(&report, &cm, format))?;
    }
    write_file(&cfg.output_dir.join(HEATMAP_FILE), render_report(&report, &cm, ReportFormat::Svg))?;
    if !report.degenerate_classes().is_empty() {
        warn!("degenerate metrics for {:?}", report.degenerate_classes());
    }
    Ok(render_report(&report, &cm, ReportFormat::Text))
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    if args.images.is_empty() {
        return Err(Error::usage("predict needs at least one image path"));
    }
    let path = match (&args.checkpoint, &args.config) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => RunConfig::load(c)?.checkpoint(),
        (None, None) => return Err(Error::usage("predict needs --checkpoint or --config")),
    };
    let model = load_checkpoint(&path)?;
    let cfg = model.config();
    let mut failures = 0;
    let mut decoded: Vec<(usize, Tensor<f32>)> = Vec::new();
    let mut lines: Vec<Vec<String>> = vec![Vec::new(); args.images.len()];
    for (i, img) in args.images.iter().enumerate() {
        match load_image(img, cfg.input_size) {
            Ok(t) => decoded.push((i, t)),
            Err(e) => {
                failures += 1;
                warn!("{e}");
                lines[i] = vec![img.display().to_string(), "error".into(), e.to_string()];
            }
        }
    }
    for chunk in decoded.chunks(args.batch_size.max(1)) {
        let batch = Tensor::stack(&chunk.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>())?;
        let pred = model.predict(&batch)?;
        let k = cfg.num_classes;
        for ((i, _), (class, row)) in chunk.iter().zip(pred.classes.iter().zip(pred.probs.data().chunks(k))) {
            let mut line = vec![args.images[*i].display().to_string(), cfg.class_name(*class)];
            line.extend(row.iter().map(|p| format!("{p:.4}")));
            lines[*i] = line;
        }
    }
    let stdout = std::io::stdout();
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_writer(stdout.lock());
    for line in &lines {
        w.write_record(line)
            .map_err(|e| Error::io("<stdout>", std::io::Error::other(e.to_string())))?;
    }
    w.flush().map_err(|e| Error::io("<stdout>", e))?;
    if failures > 0 {
        return Err(Error::data(format!("{failures} of {} images could not be classified", lines.len())));
    }
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let config_seed = match &args.config {
        Some(c) => Some(RunConfig::load(c)?.train.seed),
        None => None,
    };
    let opts = GradcheckOptions {
        seed: args.seed.or(config_seed).unwrap_or(0),
        fault: args.inject_fault.map(|f| match f {
            FaultArg::DenseBackward => Fault::DenseBackward,
        }),
        ..GradcheckOptions::default()
    };
    let start = Instant::now();
    let report = gradcheck::run(&opts)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{report}").map_err(|e| Error::io("<stdout>", e))?;
    info!("gradcheck finished in {:.2?}", start.elapsed());
    if report.passed() {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            report.max_error(),
            report.tolerance
        )))
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        per_class: args.per_class,
        size: args.size,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let written = write_png_dataset(&args.out, &spec)?;
    println!("wrote {} images to {}", written.len(), args.out.display());
    Ok(())
}
