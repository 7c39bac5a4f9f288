//! Command-line entry point: dataset generation, training, evaluation,
//! single-pair registration and the gradient check suite.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and I/O errors, 3
//! for numerical failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{RunConfig, SolverKind};
use crate::error::{Error, Result};
use crate::eval::{benchmark, estimate_pose};
use crate::geom::io::{read_cloud, write_ply};
use crate::geom::RigidTransform;
use crate::gradsuite;
use crate::losses::LossAblation;
use crate::model::Model;
use crate::synth::{Dataset, ManifestEntry, PairConfig, ShapeKind};
use crate::train::{pair_seed, train, write_loss_csv};
use crate::xencoder::DecoderKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// File names written by `train` into the output directory.
pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const LOSS_CSV_NAME: &str = "loss.csv";

#[derive(Debug, Parser)]
#[command(name = "regtr", version, about = "Rigid point-cloud registration with a transformer cross-encoder")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training, initialisation and evaluation seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single thread and zeroed timings, for byte-reproducible outputs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(["direct", "ransac-baseline", "regtr+ransac"])
        .map(|s| s.parse::<SolverKind>().expect("listed value")))]
    pub solver: Option<SolverKind>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(["regress", "weighted"])
        .map(|s| s.parse::<DecoderKind>().expect("listed value")))]
    pub decoder: Option<DecoderKind>,
    /// Number of cross-encoder layers.
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(["full", "no-feat", "circle", "all-layers"])
        .map(|s| s.parse::<LossAblation>().expect("listed value")))]
    pub loss_ablation: Option<LossAblation>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a directory of synthetic pairs and its manifest.
    GenData(GenDataArgs),
    /// Trains a model and writes its checkpoint and loss curve.
    Train(TrainArgs),
    /// Benchmarks a checkpoint on a dataset and writes the report.
    Evaluate(EvaluateArgs),
    /// Registers one source cloud onto a target cloud.
    Register(RegisterArgs),
    /// Runs the finite-difference gradient suite.
    GradCheck,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Shape kind, or `mixed` to alternate sphere caps and boxes.
    #[arg(long, default_value = "mixed")]
    pub kind: String,
    #[arg(long, default_value_t = 16)]
    pub pairs: usize,
    /// Crop keep fraction: a number in (0, 1], `hi` (0.7) or `lo` (0.5).
    #[arg(long, default_value = "hi", value_parser = parse_keep_fraction)]
    pub p: f64,
    /// Points per cloud after resampling.
    #[arg(long, default_value_t = 717)]
    pub points: usize,
    /// Points sampled on the shape before cropping.
    #[arg(long, default_value_t = 2048)]
    pub shape_points: usize,
    /// Scene tag recorded for every pair in the manifest.
    #[arg(long)]
    pub scene: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset; overrides `train_data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Defaults to `checkpoint`, then to the training output of the config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation dataset; overrides `eval_data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    pub checkpoint: PathBuf,
    pub source: PathBuf,
    pub target: PathBuf,
    /// Where the aligned source is written; defaults to
    /// `<source stem>_aligned.ply` next to the source.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_keep_fraction(s: &str) -> std::result::Result<f64, String> {
    let p = match s {
        "hi" => 0.7,
        "lo" => 0.5,
        _ => s.parse::<f64>().map_err(|_| format!("expected hi, lo or a number, got {s:?}"))?,
    };
    if p > 0.0 && p <= 1.0 {
        Ok(p)
    } else {
        Err(format!("keep fraction must be in (0, 1], got {p}"))
    }
}

/// Exit code of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_)
        | Error::NoConfidentCorrespondences
        | Error::Degenerate
        | Error::NoHypothesis
        | Error::InputTooSparse(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Failed(msg)) => {
            eprintln!("error: {msg}");
            EXIT_NUMERICAL
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

enum CliError {
    Run(Error),
    /// A check that ran to completion but did not pass.
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

fn execute(cli: &Cli) -> std::result::Result<(), CliError> {
    let g = &cli.global;
    let threads = if g.deterministic {
        1
    } else {
        g.threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    };
    if threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()).into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::GenData(a) => gen_data(g, a).map_err(Into::into),
        Command::Train(a) => train_cmd(g, a).map_err(Into::into),
        Command::Evaluate(a) => evaluate_cmd(g, a).map_err(Into::into),
        Command::Register(a) => register_cmd(g, a).map_err(Into::into),
        Command::GradCheck => grad_check_cmd(g),
    })
}

/// The configuration file (or desk defaults) with command-line overrides.
fn run_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(s) = g.solver {
        cfg.eval.solver = s;
    }
    if let Some(d) = g.decoder {
        cfg.model.decoder = d;
    }
    if let Some(l) = g.layers {
        cfg.model.layers = l;
    }
    if let Some(a) = g.loss_ablation {
        cfg.train.loss_ablation = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Architecture flags only make sense when a model is created.
fn reject_model_flags(g: &GlobalArgs, command: &str) -> Result<()> {
    if g.decoder.is_some() || g.layers.is_some() {
        return Err(Error::Config(format!(
            "--decoder and --layers apply to train; {command} uses the checkpoint's architecture"
        )));
    }
    Ok(())
}

fn require(path: Option<PathBuf>, what: &str, flag: &str, key: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("no {what}: pass {flag} or set {key} in the config")))
}

fn require_existing(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", path.display())))
    }
}

fn gen_data(g: &GlobalArgs, a: &GenDataArgs) -> Result<()> {
    let kinds: Vec<ShapeKind> = if a.kind == "mixed" {
        vec![ShapeKind::SphereCap, ShapeKind::Box]
    } else {
        vec![a.kind.parse()?]
    };
    if a.pairs == 0 {
        return Err(Error::Config("--pairs must be at least 1".into()));
    }
    let seed = g.seed.unwrap_or(0);
    let pair_cfg = PairConfig::default();
    let pairs = (0..a.pairs)
        .map(|i| {
            let entry = ManifestEntry {
                seed: pair_seed(seed, 0, i),
                kind: kinds[i % kinds.len()],
                p: a.p,
                count: a.points,
                scene: a.scene.clone(),
            };
            let pair = entry.generate(&pair_cfg, a.shape_points)?;
            Ok((entry, pair))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::write(&a.out, &pairs)?;
    let mean = pairs.iter().map(|(_, p)| p.overlap_fraction).sum::<f64>() / pairs.len() as f64;
    println!("pairs = {}", pairs.len());
    println!("mean_overlap = {mean:.4}");
    println!("dir = {}", a.out.display());
    Ok(())
}

fn train_cmd(g: &GlobalArgs, a: &TrainArgs) -> Result<()> {
    let mut cfg = run_config(g)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let data = require(a.data.clone().or(cfg.train_data.clone()), "training data", "--data", "train_data")?;
    let out = require(a.out.clone().or(cfg.output_dir.clone()), "output directory", "--out", "output_dir")?;
    require_existing(&data)?;
    let dataset = Dataset::load(&data, cfg.model.overlap_radius)?;
    let pairs: Vec<_> = dataset.pairs.iter().map(|s| s.pair.clone()).collect();
    let mut model = Model::<f32>::init(cfg.model.clone(), cfg.train.seed)?;
    let curve = train(&mut model, &pairs, &cfg.train, |s, _| {
        println!("epoch {} loss {:.6}", s.epoch, s.loss.total);
    })?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    checkpoint::save(&model, &out.join(CHECKPOINT_NAME))?;
    write_loss_csv(&out.join(LOSS_CSV_NAME), &curve)?;
    println!("checkpoint = {}", out.join(CHECKPOINT_NAME).display());
    Ok(())
}

fn evaluate_cmd(g: &GlobalArgs, a: &EvaluateArgs) -> Result<()> {
    reject_model_flags(g, "evaluate")?;
    let cfg = run_config(g)?;
    let ckpt = a
        .checkpoint
        .clone()
        .or(cfg.checkpoint.clone())
        .or(cfg.output_dir.as_ref().map(|d| d.join(CHECKPOINT_NAME)));
    let ckpt = require(ckpt, "checkpoint", "--checkpoint", "checkpoint")?;
    let data = require(a.data.clone().or(cfg.eval_data.clone()), "evaluation data", "--data", "eval_data")?;
    let out = require(a.out.clone().or(cfg.output_dir.clone()), "report directory", "--out", "output_dir")?;
    require_existing(&ckpt)?;
    require_existing(&data)?;
    let model = checkpoint::load(&ckpt)?;
    let dataset = Dataset::load(&data, model.config().overlap_radius)?;
    let report = benchmark(&model, &dataset, &cfg.eval, g.deterministic)?;
    report.write(&out)?;
    print!("{}", report.summary_text()?);
    Ok(())
}

/// `R | t` as three rows of four values.
pub fn transform_3x4(t: &RigidTransform) -> String {
    let (r, v) = (t.rotation(), t.translation());
    (0..3)
        .map(|i| format!("{} {} {} {}\n", r[(i, 0)], r[(i, 1)], r[(i, 2)], v[i]))
        .collect()
}

fn register_cmd(g: &GlobalArgs, a: &RegisterArgs) -> Result<()> {
    reject_model_flags(g, "register")?;
    let cfg = run_config(g)?;
    let model = checkpoint::load(&a.checkpoint)?;
    let source = read_cloud(&a.source)?;
    let target = read_cloud(&a.target)?;
    let inf = model.infer(&source, &target)?;
    let est = estimate_pose(&inf, &cfg.eval, cfg.eval.threshold(model.config()), cfg.eval.seed)?;
    let out = a.out.clone().unwrap_or_else(|| {
        let stem = a.source.file_stem().map_or("source".into(), |s| s.to_string_lossy().into_owned());
        a.source.with_file_name(format!("{stem}_aligned.ply"))
    });
    write_ply(&out, &est.apply(&source))?;
    print!("{}", transform_3x4(&est));
    Ok(())
}

fn grad_check_cmd(g: &GlobalArgs) -> std::result::Result<(), CliError> {
    let outcomes = gradsuite::run(g.seed.unwrap_or(0))?;
    let mut failed = 0;
    for c in &outcomes {
        let status = if c.passes() { "pass" } else { "FAIL" };
        println!("{status} {:<28} max_rel_error {:.3e}", c.name, c.max_rel_error);
        failed += usize::from(!c.passes());
    }
    println!("{} checks, {failed} failed (tolerance {:e})", outcomes.len(), gradsuite::TOLERANCE);
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} gradient checks failed")));
    }
    Ok(())
}
