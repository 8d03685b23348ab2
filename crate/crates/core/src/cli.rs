//! `gaze-forge` command line: data generation, training, evaluation,
//! prediction, ensembling and gradient checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::dataset::{generate_synthetic, load_manifest, split, Dataset, SplitSpec, SynthConfig};
use crate::ensemble::{combine, score, weight_search, AverageMode, EnsembleSpec, PredictionSet};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckConfig};
use crate::models::{Family, FamilyParams, GazeModel, ModelConfig};
use crate::train::{evaluate, fit_with, mean_label_baseline, predict, OhemConfig, Schedule, TrainConfig};

pub const THREADS_ENV: &str = "GAZE_FORGE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "gaze-forge", version, about = "Gaze estimation training and ensembling toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic gaze dataset (PPM images + manifest.csv).
    GenData(GenDataArgs),
    /// Train one architecture with a subject-based validation split.
    Train(TrainArgs),
    /// Print the mean angular error of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write per-sample predictions as `id,pitch,yaw` CSV.
    Predict(PredictArgs),
    /// Blend prediction files and score them against ground truth.
    Ensemble(EnsembleArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// JSON file with synthetic-set settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub num_subjects: Option<usize>,
    #[arg(long)]
    pub samples_per_subject: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON file with any of the resolved-config keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// ITRACKER_MHSA, BOTNET, HRNET or RESNEST.
    #[arg(long)]
    pub arch: Option<Family>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub width: Option<f64>,
    /// Dataset directory (containing manifest.csv) or manifest path.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated validation subject IDs.
    #[arg(long)]
    pub val_subjects: Option<String>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report CSV path (default: `<out>.report.csv`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Hyperparameter preset: desk or reference.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Only samples of these comma-separated subjects.
    #[arg(long)]
    pub subjects: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// `{"members": [{"pred": "<csv>", "weight": w}, ...]}`
    #[arg(long)]
    pub spec: PathBuf,
    /// Ground truth: a predictions CSV or a dataset manifest.
    #[arg(long)]
    pub truth: PathBuf,
    /// Grid-search the weights instead of using the spec's.
    #[arg(long)]
    pub search: bool,
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    /// Average unit gaze vectors instead of (pitch, yaw).
    #[arg(long)]
    pub vector_average: bool,
    /// Write the blended predictions here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// A case name, or one of the groups ops, blocks, models.
    #[arg(long)]
    pub op: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Reference,
}

/// Hyperparameters that may be overridden piecewise on top of a preset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub schedule: Option<Schedule>,
    pub epochs: Option<usize>,
    pub ohem: Option<OhemConfig>,
    pub flip_augment: Option<bool>,
}

/// `train` options as read from a config file; every key optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub arch: Option<Family>,
    pub input_size: Option<usize>,
    pub width_multiplier: Option<f64>,
    pub family_params: Option<FamilyParams>,
    pub data: Option<PathBuf>,
    pub val_subjects: Option<Vec<String>>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub train: Option<TrainOverrides>,
}

/// Fully resolved `train` invocation, echoed to stderr.
#[derive(Debug, Clone, Serialize)]
pub struct TrainRun {
    pub model: ModelConfig,
    pub data: PathBuf,
    pub val_subjects: Vec<String>,
    pub out: PathBuf,
    pub report: PathBuf,
    pub preset: Preset,
    pub train: TrainConfig,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn echo<T: Serialize>(command: &str, cfg: &T) {
    let json = serde_json::to_string(cfg).unwrap_or_else(|e| format!("\"<unserializable: {e}>\""));
    eprintln!("{{\"command\":\"{command}\",\"config\":{json}}}");
}

pub fn resolve_gen_data(args: &GenDataArgs) -> Result<SynthConfig> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.image_size {
        cfg.image_size = v;
    }
    if let Some(v) = args.num_subjects {
        cfg.num_subjects = v;
    }
    if let Some(v) = args.samples_per_subject {
        cfg.samples_per_subject = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_train(args: &TrainArgs) -> Result<TrainRun> {
    let file: TrainFile = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let missing = |flag: &str| Error::Config(format!("--{flag} is required (flag or config file)"));
    let arch = args.arch.or(file.arch).ok_or_else(|| missing("arch"))?;
    let input_size = args.input_size.or(file.input_size).unwrap_or(64);
    let width = args.width.or(file.width_multiplier).unwrap_or(0.125);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let mut model = ModelConfig::new(arch, input_size, width, seed);
    if let Some(fp) = file.family_params {
        model.family_params = fp;
    }
    model.validate()?;
    let data = args.data.clone().or(file.data).ok_or_else(|| missing("data"))?;
    let val_subjects = match (&args.val_subjects, file.val_subjects) {
        (Some(list), _) => SplitSpec::parse(list)?.val_subjects,
        (None, Some(v)) => v,
        (None, None) => SplitSpec::default().val_subjects,
    };
    let out = args.out.clone().or(file.out).ok_or_else(|| missing("out"))?;
    let report = args.report.clone().or(file.report).unwrap_or_else(|| {
        let mut s = out.clone().into_os_string();
        s.push(".report.csv");
        PathBuf::from(s)
    });
    let preset = args.preset.or(file.preset).unwrap_or(Preset::Desk);
    let mut train = match preset {
        Preset::Desk => TrainConfig::desk_preset(arch),
        Preset::Reference => TrainConfig::reference_preset(arch),
    };
    let o = file.train.unwrap_or_default();
    train.batch_size = args.batch_size.or(o.batch_size).unwrap_or(train.batch_size);
    train.lr0 = args.lr.or(o.lr0).unwrap_or(train.lr0);
    train.epochs = args.epochs.or(o.epochs).unwrap_or(train.epochs);
    train.schedule = o.schedule.unwrap_or(train.schedule);
    train.ohem = o.ohem.unwrap_or(train.ohem);
    train.flip_augment = o.flip_augment.unwrap_or(train.flip_augment);
    train.seed = seed;
    train.validate()?;
    Ok(TrainRun {
        model,
        data,
        val_subjects,
        out,
        report,
        preset,
        train,
    })
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.csv")
    } else {
        data.to_path_buf()
    }
}

fn load_subset(data: &Path, subjects: Option<&str>) -> Result<Dataset> {
    let ds = load_manifest(&manifest_path(data))?;
    match subjects {
        None => Ok(ds),
        Some(list) => {
            let spec = SplitSpec::parse(list)?;
            let samples: Vec<_> = ds.samples.into_iter().filter(|s| spec.contains(&s.subject)).collect();
            if samples.is_empty() {
                return Err(Error::Data(format!("no samples belong to subjects {list}")));
            }
            Ok(Dataset { root: ds.root, samples })
        }
    }
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = resolve_gen_data(args)?;
    echo("gen-data", &serde_json::json!({ "synth": cfg, "out": args.out }));
    let ds = generate_synthetic(&cfg, &args.out)?;
    println!(
        "wrote {} samples from {} subjects to {}",
        ds.len(),
        ds.subjects().len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let run = resolve_train(args)?;
    echo("train", &run);
    let ds = load_manifest(&manifest_path(&run.data))?;
    let parts = split(
        &ds,
        &SplitSpec {
            val_subjects: run.val_subjects.clone(),
        },
    )?;
    if !parts.absent.is_empty() {
        eprintln!("warning: validation subjects not in the data: {}", parts.absent.join(", "));
    }
    eprintln!(
        "train {} samples, val {} samples; mean-label baseline {:.4} deg",
        parts.train.len(),
        parts.val.len(),
        mean_label_baseline(&parts.train, &parts.val)?
    );
    let model = GazeModel::<f32>::build(&run.model)?;
    eprintln!("{} with {} parameters", run.model.family, model.param_count());
    let outcome = fit_with(&model, &parts.train, &parts.val, &run.train, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val {:.4} deg  lr {:.3e}  {:.1}s",
            r.epoch, r.train_loss, r.val_error_deg, r.lr, r.wall_seconds
        );
    })?;
    outcome.checkpoint.write(&run.out)?;
    std::fs::write(&run.report, outcome.report.to_csv()).map_err(|e| Error::io(&run.report, e))?;
    match outcome.report.best() {
        Some(b) => println!("best epoch {}: val {:.4} deg; checkpoint {}", b.epoch, b.val_error_deg, run.out.display()),
        None => println!("no epochs run; wrote the initial model to {}", run.out.display()),
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    echo("eval", &serde_json::json!({ "ckpt": args.ckpt, "data": args.data, "subjects": args.subjects, "batch_size": args.batch_size }));
    let model = GazeModel::<f32>::load(&args.ckpt)?;
    let ds = load_subset(&args.data, args.subjects.as_deref())?;
    let e = evaluate(&model, &ds, args.batch_size)?;
    println!("{:.4}", e.mean_deg);
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    echo("predict", &serde_json::json!({ "ckpt": args.ckpt, "data": args.data, "out": args.out, "subjects": args.subjects, "batch_size": args.batch_size }));
    let model = GazeModel::<f32>::load(&args.ckpt)?;
    let ds = load_subset(&args.data, args.subjects.as_deref())?;
    let preds = predict(&model, &ds, args.batch_size)?;
    let set = PredictionSet::new(
        args.ckpt.display().to_string(),
        ds.samples.iter().map(|s| s.id.clone()).zip(preds).collect(),
    )?;
    set.write_csv(&args.out)?;
    println!("wrote {} predictions to {}", set.len(), args.out.display());
    Ok(())
}

/// Drops truth rows without a prediction when the truth file covers more
/// samples than were predicted, e.g. a whole manifest against a validation
/// subset. Predictions missing from the truth are left for `score` to report.
fn truth_for(truth: PredictionSet, pred: &PredictionSet) -> PredictionSet {
    let wanted = pred.ids();
    let covered = {
        let have = truth.ids();
        wanted.iter().all(|id| have.contains(id))
    };
    if truth.len() <= wanted.len() || !covered {
        return truth;
    }
    let dropped = truth.len() - wanted.len();
    eprintln!("note: ignoring {dropped} truth rows that have no prediction");
    PredictionSet {
        source: truth.source.clone(),
        entries: truth.entries.into_iter().filter(|(id, _)| wanted.contains(id.as_str())).collect(),
    }
}

fn cmd_ensemble(args: &EnsembleArgs) -> Result<()> {
    echo("ensemble", &serde_json::json!({
        "spec": args.spec, "truth": args.truth, "search": args.search, "step": args.step,
        "vector_average": args.vector_average, "out": args.out,
    }));
    let (spec, sets) = EnsembleSpec::load(&args.spec)?;
    let truth = truth_for(PredictionSet::read_csv(&args.truth)?, &sets[0]);
    let refs: Vec<&PredictionSet> = sets.iter().collect();
    let mode = if args.vector_average { AverageMode::Vectors } else { AverageMode::Angles };
    let weights = if args.search {
        if mode == AverageMode::Vectors {
            return Err(Error::Config("--search scores angle-space blends; drop --vector-average".into()));
        }
        let res = weight_search(&refs, &truth, args.step)?;
        let shown: Vec<String> = res.weights.iter().map(|w| format!("{w:.4}")).collect();
        println!("searched {} weight vectors; best weights [{}]", res.nodes, shown.join(", "));
        res.weights
    } else {
        spec.weights()
    };
    for (set, m) in sets.iter().zip(&spec.members) {
        println!("member {}: {:.4}", m.pred.display(), score(set, &truth)?);
    }
    let blended = combine(&refs, &weights, mode)?;
    if let Some(out) = &args.out {
        blended.write_csv(out)?;
    }
    println!("ensemble score: {:.4}", score(&blended, &truth)?);
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let cfg = GradCheckConfig {
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    echo("gradcheck", &serde_json::json!({ "op": args.op, "h": cfg.h, "tolerance": cfg.tolerance, "coords": cfg.coords, "seed": cfg.seed }));
    let reports = gradcheck::run(args.op.as_deref(), &cfg)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<5} {:<26} coords {:>3}  max rel err {:.3e}",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.coords,
            r.max_rel_err
        );
        if !r.passed {
            println!("      worst {}", r.worst);
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        println!("{} gradient checks passed", reports.len());
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) => 1,
        Error::Numeric(_) => 3,
        Error::Dim(_) | Error::Data(_) | Error::Corrupt(_) | Error::Version(_) | Error::Io { .. } => 2,
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV}={raw:?} is not a non-negative integer")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
