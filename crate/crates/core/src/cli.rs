//! Command-line front end: `analyze`, `synth`, `split`, `train`, `eval` and
//! `predict`.
//!
//! Exit codes are 0 on success, 1 for usage errors and 2 for failures while
//! running a well-formed command.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analyzer::{self, FlopConvention};
use crate::data::{self, DatasetManifest, Split, SplitSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{checkpoint, ModelConfig, SceneMixer};
use crate::train::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "scenemixer", version, about = "Convolutional-mixer scene classifier")]
pub struct Cli {
    /// Worker threads for data-parallel work (default: all cores). Results
    /// do not depend on this value.
    #[arg(long, global = true, value_name = "T")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print per-layer parameter, MAC and FLOP counts.
    Analyze(AnalyzeArgs),
    /// Write a synthetic textured-scene dataset as a PPM tree.
    Synth(SynthArgs),
    /// Assign a stratified train/val/test split and write it as CSV.
    Split(SplitArgs),
    /// Train a model and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Print the predicted class name of one image.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FlopArg {
    /// 2 x MACs plus bias additions.
    Bias,
    /// 2 x MACs.
    Macs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Model config file (key=value lines); the 64x64x3 ten-class default when omitted.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Also write the per-layer table as CSV.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    /// FLOP counting convention.
    #[arg(long, value_enum, default_value_t = FlopArg::Bias)]
    pub flops: FlopArg,
    /// Count trainable parameters only (drops batch-norm running statistics).
    #[arg(long)]
    pub trainable_only: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for the `<class>/<image>.ppm` tree.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of classes (2 to 6).
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Images per class.
    #[arg(long, default_value_t = 250)]
    pub per_class: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub side: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gaussian pixel noise standard deviation in byte units.
    #[arg(long, default_value_t = 10.0)]
    pub noise: f64,
    /// Render every image of a class from the same template.
    #[arg(long)]
    pub no_jitter: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset root holding one directory per class.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV with columns path,class,split.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root holding one directory per class.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Split manifest written by `split`; otherwise the split is derived from --split-seed.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Seed for deriving the split when no manifest is given.
    #[arg(long, value_name = "S")]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Model config file; num_classes and class names are taken from the data.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Seed for weight init, shuffling and (without --split-seed) the split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Initial learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Checkpoint path for the best-validation weights.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Per-epoch history CSV.
    #[arg(long, value_name = "FILE")]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Seed of the derived split when neither --manifest nor --split-seed is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Confusion matrix CSV.
    #[arg(long, value_name = "FILE")]
    pub confusion: Option<PathBuf>,
    /// Metrics CSV (also printed on standard output).
    #[arg(long, value_name = "FILE")]
    pub metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint to use.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// A .ppm or .smxt image.
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn dispatch(cli: Cli) -> std::result::Result<(), Failure> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::Usage("--threads must be >= 1".into()));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start thread pool: {e}")))?;
    eprintln!("threads={}", pool.current_num_threads());
    pool.install(|| match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
    })
    .map_err(Failure::from)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        None => Ok(ModelConfig::default()),
        Some(p) => ModelConfig::from_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
    }
}

fn print_config(cfg: &ModelConfig) {
    for line in cfg.to_text().lines() {
        eprintln!("  {line}");
    }
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let cfg = read_config(a.config.as_deref())?;
    let convention = match a.flops {
        FlopArg::Bias => FlopConvention::BiasInclusive,
        FlopArg::Macs => FlopConvention::MacsOnly,
    };
    eprintln!("analyze: flops={:?} trainable_only={}", a.flops, a.trainable_only);
    print_config(&cfg);
    let report = analyzer::analyze(&cfg, convention, a.trainable_only)?;
    print!("{}", report.to_table());
    if let Some(p) = &a.csv {
        write(p, report.to_csv())?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        classes: a.classes,
        per_class: a.per_class,
        side: a.side,
        seed: a.seed,
        noise_sigma: a.noise,
        jitter: !a.no_jitter,
    };
    eprintln!(
        "synth: out={} classes={} per_class={} side={} seed={} noise={} jitter={}",
        a.out.display(),
        spec.classes,
        spec.per_class,
        spec.side,
        spec.seed,
        spec.noise_sigma,
        spec.jitter
    );
    let manifest = data::synth_generate(&spec)?;
    data::write_ppm_tree(&manifest, &a.out)?;
    eprintln!("wrote {} images", manifest.samples.len());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    eprintln!("split: data={} seed={} out={}", a.data.display(), a.seed, a.out.display());
    let mut manifest = data::load_dataset(&a.data)?;
    data::stratified_split(&mut manifest, &SplitSpec::with_seed(a.seed))?;
    write(&a.out, manifest.split_csv())?;
    for (c, name) in manifest.class_names.iter().enumerate() {
        eprintln!(
            "  {name}: train={} val={} test={}",
            manifest.count(c, Split::Train),
            manifest.count(c, Split::Val),
            manifest.count(c, Split::Test)
        );
    }
    Ok(())
}

/// Loads the dataset and assigns splits from the manifest file or a seed.
fn load_split(d: &DataArgs, default_seed: u64) -> Result<DatasetManifest> {
    let mut manifest = data::load_dataset(&d.data)?;
    match &d.manifest {
        Some(p) => manifest.apply_split_csv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => data::stratified_split(
            &mut manifest,
            &SplitSpec::with_seed(d.split_seed.unwrap_or(default_seed)),
        )?,
    }
    Ok(manifest)
}

fn describe_split_source(d: &DataArgs, default_seed: u64) -> String {
    match &d.manifest {
        Some(p) => format!("manifest={}", p.display()),
        None => format!("split_seed={}", d.split_seed.unwrap_or(default_seed)),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    let manifest = load_split(&a.data, a.seed)?;
    if cfg.num_classes != manifest.num_classes() {
        eprintln!(
            "note: num_classes {} replaced by the {} classes found in {}",
            cfg.num_classes,
            manifest.num_classes(),
            a.data.data.display()
        );
    }
    cfg.num_classes = manifest.num_classes();
    cfg.class_names = manifest.class_names.clone();
    cfg.validate()?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr_init: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    tc.validate()?;
    eprintln!(
        "train: data={} {} epochs={} batch={} seed={} lr={} out={} history={}",
        a.data.data.display(),
        describe_split_source(&a.data, a.seed),
        tc.epochs,
        tc.batch_size,
        tc.seed,
        tc.lr_init,
        a.out.display(),
        a.history.as_ref().map_or("-".into(), |p| p.display().to_string())
    );
    print_config(&cfg);
    let (h, w) = (cfg.input_h, cfg.input_w);
    let train_set = manifest.materialize(Split::Train, h, w)?;
    let val_set = manifest.materialize(Split::Val, h, w)?;
    if train_set.image_dims()[2] != cfg.input_c {
        return Err(Error::Config(format!(
            "images have {} channels, config expects {}",
            train_set.image_dims()[2],
            cfg.input_c
        )));
    }
    eprintln!("train={} val={}", train_set.len(), val_set.len());
    let model = SceneMixer::<f32>::build(cfg, a.seed)?;
    let (best, history) = train::fit_with(model, &train_set, &val_set, &tc, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train_oa {:.4}  val_loss {:.4}  val_oa {:.4}  lr {}",
            r.epoch, r.train_loss, r.train_oa, r.val_loss, r.val_oa, r.lr
        );
    })?;
    checkpoint::save(&best, &a.out)?;
    if let Some(p) = &a.history {
        write(p, history.to_csv())?;
    }
    eprintln!(
        "best epoch {} val_oa {:.4}",
        history.best_epoch,
        history.best_val_oa().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = checkpoint::load(&a.model)?;
    let cfg = model.config().clone();
    eprintln!(
        "eval: model={} data={} {} split={} batch={}",
        a.model.display(),
        a.data.data.display(),
        describe_split_source(&a.data, a.seed),
        Split::from(a.split),
        a.batch
    );
    print_config(&cfg);
    let manifest = load_split(&a.data, a.seed)?;
    if manifest.num_classes() != cfg.num_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model has {}",
            manifest.num_classes(),
            cfg.num_classes
        )));
    }
    if !cfg.class_names.is_empty() && cfg.class_names != manifest.class_names {
        return Err(Error::Dataset("dataset class names differ from the model's".into()));
    }
    let set = manifest.materialize(a.split.into(), cfg.input_h, cfg.input_w)?;
    let (_, preds) = train::evaluate(&model, &set, a.batch)?;
    let cm = ConfusionMatrix::from_labels(set.labels(), &preds, cfg.num_classes)?
        .with_class_names(manifest.class_names.clone())?;
    let summary = cm.summary()?;
    let csv = summary.to_csv();
    print!("{csv}");
    if let Some(p) = &a.metrics {
        write(p, &csv)?;
    }
    if let Some(p) = &a.confusion {
        write(p, cm.to_csv())?;
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = checkpoint::load(&a.model)?;
    let cfg = model.config();
    eprintln!("predict: model={} image={}", a.model.display(), a.image.display());
    print_config(cfg);
    let img = data::read_image(&a.image)?;
    let img = data::normalize(&data::resize_bilinear(&img, cfg.input_h, cfg.input_w)?);
    let c = img.dims()[2];
    let x = img.reshape(&[1, cfg.input_h, cfg.input_w, c])?;
    let class = model.predict(&x)?[0];
    match cfg.class_names.get(class) {
        Some(name) => println!("{name}"),
        None => println!("{class}"),
    }
    Ok(())
}
