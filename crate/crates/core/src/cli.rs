//! Command-line surface: synthesize datasets, preprocess images, train,
//! evaluate, and register single pairs. All commands are deterministic
//! under a fixed --seed and write self-describing outputs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::augment::{synth_pair, AugmentConfig, SynthConfig};
use crate::core::{GrayImage, ImageData};
use crate::error::{Error, Result};
use crate::imageops::{preprocess, Branch, PreprocessParams};
use crate::io_fire::{load_fire, load_image, load_points, save_image, save_pair, save_points, DatasetLayout};
use crate::model::{Checkpoint, TrainConfig, CHECKPOINT_VERSION};
use crate::observation::ObsConfig;
use crate::registration::{
    holdout_evaluate, leave_one_out, EvalOptions, EvalReport, TransformModel,
};

#[derive(Debug, Parser)]
#[command(name = "retreg", version, about = "Retinal fundus image registration toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic vessel-tree dataset on disk.
    Synth(SynthArgs),
    /// Preprocess one image with a chosen branch and write the result.
    Preprocess(PreprocessArgs),
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate with leave-one-out or a held-out split; write reports.
    Evaluate(EvaluateArgs),
    /// Register one image pair with a trained checkpoint.
    Register(RegisterArgs),
}

#[derive(Debug, Args, Clone)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n_pairs: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 10)]
    pub n_landmarks: usize,
    /// Max translation magnitude of the drawn transform, pixels.
    #[arg(long, default_value_t = 30.0)]
    pub trans_range: f64,
    /// Max rotation of the drawn transform, degrees.
    #[arg(long, default_value_t = 5.0)]
    pub rot_range: f64,
    /// Number of vessel trees per image.
    #[arg(long, default_value_t = 6)]
    pub n_vessels: usize,
    /// Vessel stroke width range in pixels, "min,max".
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.5, 3.0])]
    pub vessel_width: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "guided-frangi")]
    pub branch: Branch,
    /// LoG sigma for the histeq-log branch.
    #[arg(long, default_value_t = 2.0)]
    pub log_sigma: f64,
}

#[derive(Debug, Args, Clone)]
pub struct ObsArgs {
    /// Patch side length C in samples.
    #[arg(long, default_value_t = 20)]
    pub c: usize,
    /// Sampling step S in pixels.
    #[arg(long, default_value_t = 40.0)]
    pub s: f64,
    #[arg(long, default_value = "guided-frangi")]
    pub branch: Branch,
}

#[derive(Debug, Args, Clone)]
pub struct TrainOptArgs {
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Decoupled L2 weight decay per Adam step.
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![256, 128])]
    pub hidden: Vec<usize>,
    /// Augmented copies per training pair.
    #[arg(long, default_value_t = 64)]
    pub copies: usize,
    /// Augmentation translation range, pixels.
    #[arg(long, default_value_t = 50.0)]
    pub aug_trans: f64,
    /// Augmentation rotation range, degrees.
    #[arg(long, default_value_t = 10.0)]
    pub aug_rot: f64,
    /// Observation-level variants per sample (landmark permutation plus a
    /// patch flip); 1 disables them.
    #[arg(long, default_value_t = 4)]
    pub obs_variants: usize,
    /// Disable the shared both-sides affine applied to each augmented copy.
    #[arg(long, default_value_t = false)]
    pub no_aug_both: bool,
    /// Warp-and-refine model applications per registration.
    #[arg(long, default_value_t = 3)]
    pub iterations: usize,
    /// Skip the second, finer-spacing refinement model.
    #[arg(long, default_value_t = false)]
    pub no_refine: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root (images/ + ground_truth/).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub obs: ObsArgs,
    #[command(flatten)]
    pub train: TrainOptArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Report path prefix; writes <prefix>.tsv and <prefix>.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluation protocol.
    #[arg(long, default_value = "holdout")]
    pub protocol: String,
    /// Training fraction for the holdout protocol.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// C grid; more than one value triggers a sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![20])]
    pub c: Vec<usize>,
    /// S grid; more than one value triggers a sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![40.0])]
    pub s: Vec<f64>,
    #[arg(long, default_value = "guided-frangi")]
    pub branch: Branch,
    #[command(flatten)]
    pub train: TrainOptArgs,
    #[arg(long, default_value = "affine")]
    pub transform_model: TransformModel,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl clap::builder::ValueParserFactory for TransformModel {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<TransformModel>())
    }
}

impl clap::builder::ValueParserFactory for Branch {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Branch>())
    }
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Source landmark file, one "x y" row per landmark.
    #[arg(long)]
    pub points: PathBuf,
    /// Output path prefix.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "affine")]
    pub transform_model: TransformModel,
    /// Warp-and-refine model applications.
    #[arg(long, default_value_t = 3)]
    pub iterations: usize,
    /// Also write a checkerboard overlay of target and warped source.
    #[arg(long, default_value_t = false)]
    pub debug: bool,
}

#[derive(Debug, Serialize)]
struct SynthManifest {
    n_pairs: usize,
    size: usize,
    n_landmarks: usize,
    trans_range: f64,
    rot_range: f64,
    seed: u64,
    ids: Vec<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::IoFailure {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::IoFailure {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Synthesize `n_pairs` pairs into the dataset layout, with a manifest.
pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let layout = DatasetLayout::rooted(&args.out);
    let mut ids = Vec::with_capacity(args.n_pairs);
    for i in 0..args.n_pairs {
        let id = format!("X{i:03}");
        if args.vessel_width.len() != 2 {
            return Err(Error::InvalidConfig(
                "--vessel-width expects two values: min,max".into(),
            ));
        }
        let cfg = SynthConfig {
            size: args.size,
            n_landmarks: args.n_landmarks,
            n_vessels: args.n_vessels,
            vessel_width_range: (args.vessel_width[0], args.vessel_width[1]),
            seed: args.seed.wrapping_add(i as u64),
            transform: AugmentConfig {
                copies: 0,
                trans_range: args.trans_range,
                rot_range: args.rot_range,
                scale_range: (1.0, 1.0),
                shear_range: 0.0,
                ..AugmentConfig::default()
            },
            ..SynthConfig::default()
        };
        let sp = synth_pair(&cfg, &id)?;
        save_pair(&layout, &sp.pair, Some(&sp.truth))?;
        ids.push(id);
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::IoFailure {
        path: args.out.clone(),
        source: e,
    })?;
    let manifest = SynthManifest {
        n_pairs: args.n_pairs,
        size: args.size,
        n_landmarks: args.n_landmarks,
        trans_range: args.trans_range,
        rot_range: args.rot_range,
        seed: args.seed,
        ids,
    };
    write_text(
        &args.out.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    println!("wrote {} pairs to {}", args.n_pairs, args.out.display());
    Ok(())
}

/// Preprocess one image and print min/max/mean statistics.
pub fn cmd_preprocess(args: &PreprocessArgs) -> Result<()> {
    let img = load_image(&args.input)?;
    let params = PreprocessParams {
        log_sigma: args.log_sigma,
        ..PreprocessParams::default()
    };
    let out = preprocess(&img, args.branch, &params)?;
    save_image(&out, &args.out)?;
    let min = out.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = out.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = out.data.iter().sum::<f64>() / out.data.len() as f64;
    println!(
        "{} -> {} ({}x{}) min {min:.4} max {max:.4} mean {mean:.4}",
        args.input.display(),
        args.out.display(),
        out.width,
        out.height
    );
    Ok(())
}

fn eval_options(
    obs: &ObsArgs,
    train: &TrainOptArgs,
    transform_model: TransformModel,
    seed: u64,
) -> EvalOptions {
    EvalOptions {
        obs: ObsConfig {
            c: obs.c,
            s: obs.s,
            fill: 0.0,
        },
        branch: obs.branch,
        pre: PreprocessParams::default(),
        transform_model,
        train: TrainConfig {
            lr: train.lr,
            epochs: train.epochs,
            batch_size: train.batch_size,
            patience: train.patience,
            weight_decay: train.weight_decay,
            seed,
            ..TrainConfig::default()
        },
        augment: AugmentConfig {
            copies: train.copies,
            trans_range: train.aug_trans,
            rot_range: train.aug_rot,
            seed,
            ..AugmentConfig::default()
        },
        hidden: train.hidden.clone(),
        obs_variants: train.obs_variants.max(1),
        augment_both: !train.no_aug_both,
        iterations: train.iterations.max(1),
        refine: !train.no_refine,
        seed,
    }
}

/// Train on the whole dataset (0.9/0.1 split inside training) and write a
/// checkpoint with the embedded configuration.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let pairs = load_fire(&DatasetLayout::rooted(&args.dataset))?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let opts = eval_options(&args.obs, &args.train, TransformModel::Affine, args.seed);
    let k = pairs[0].source_landmarks.len();
    let scale = crate::registration::displacement_scale_for(&pairs);
    let samples = crate::registration::build_samples(&pairs, &opts, scale)?;
    let (params, history) = crate::model::train(&samples, k, &opts.hidden, &opts.train)?;
    for (epoch, (tl, vl)) in history.iter().enumerate() {
        println!("epoch {epoch}: train {tl:.6} val {vl:.6}");
    }
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        params,
        obs_config: opts.obs,
        branch: opts.branch,
        preprocess: opts.pre.clone(),
        displacement_scale: scale,
    };
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::IoFailure {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
    }
    ckpt.save(&args.out)?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn write_report(report: &EvalReport, prefix: &Path) -> Result<()> {
    write_text(&prefix.with_extension("tsv"), &report.to_table())?;
    write_text(&prefix.with_extension("json"), &report.to_json())?;
    Ok(())
}

fn print_summary(report: &EvalReport) {
    for s in &report.per_category {
        println!(
            "category {}: n {} | TRE initial {:.2}+/-{:.2} | TRE final {:.2}+/-{:.2} | recovery {:.1}%+/-{:.1}",
            s.category,
            s.n,
            s.tre_initial_mean,
            s.tre_initial_std,
            s.tre_final_mean,
            s.tre_final_std,
            s.recovery_mean,
            s.recovery_std
        );
    }
}

/// Run leave-one-out or holdout evaluation over a (possibly 1x1) C/S grid.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let pairs = load_fire(&DatasetLayout::rooted(&args.dataset))?;
    let sweep = args.c.len() * args.s.len() > 1;
    for &c in &args.c {
        for &s in &args.s {
            let obs = ObsArgs {
                c,
                s,
                branch: args.branch,
            };
            let opts = eval_options(&obs, &args.train, args.transform_model, args.seed);
            let report = match args.protocol.as_str() {
                "loo" => leave_one_out(&pairs, &opts)?,
                "holdout" => holdout_evaluate(&pairs, &opts, args.train_fraction)?,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown protocol {other:?} (use loo or holdout)"
                    )))
                }
            };
            let prefix = if sweep {
                let stem = args
                    .out
                    .file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "report".into());
                args.out
                    .with_file_name(format!("{stem}_c{c}_s{s}"))
            } else {
                args.out.clone()
            };
            write_report(&report, &prefix)?;
            println!("C={c} S={s} mean recovery {:.1}%", report.mean_recovery());
            print_summary(&report);
        }
    }
    Ok(())
}

fn checkerboard(a: &GrayImage, b: &GrayImage, tile: usize) -> GrayImage {
    let mut out = a.clone();
    for y in 0..out.height {
        for x in 0..out.width {
            if ((x / tile) + (y / tile)) % 2 == 1 {
                out.set(x, y, b.get(x, y));
            }
        }
    }
    out
}

/// Register one pair: predict displacements, fit the transform, and write
/// the transform, predicted points, and the warped source image.
pub fn cmd_register(args: &RegisterArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let source = load_image(&args.source)?;
    let target = load_image(&args.target)?;
    let points = load_points(&args.points)?;
    if points.len() != ckpt.params.k {
        return Err(Error::ConfigMismatch(format!(
            "{} landmarks in {}, checkpoint expects {}",
            points.len(),
            args.points.display(),
            ckpt.params.k
        )));
    }

    let (transform, raw_points) = crate::registration::predict_transform(
        &ckpt.params,
        &source,
        &target,
        &points,
        &ckpt.obs_config,
        ckpt.branch,
        &ckpt.preprocess,
        ckpt.displacement_scale,
        args.transform_model,
        args.iterations.max(1),
    )?;

    // Transform row-major: a11 a12 tx a21 a22 ty.
    let m = transform.m;
    write_text(
        &args.out.with_extension("transform.txt"),
        &format!("{} {} {} {} {} {}\n", m[0], m[1], m[2], m[3], m[4], m[5]),
    )?;
    save_points(&raw_points, &args.out.with_extension("points_pred.txt"))?;
    save_points(
        &transform.apply_set(&points),
        &args.out.with_extension("points_fit.txt"),
    )?;

    let src_gray = match &source {
        ImageData::Gray(g) => crate::imageops::standardize(g),
        ImageData::Rgb(c) => crate::imageops::standardize(&crate::imageops::to_gray(
            c,
            crate::imageops::GrayMode::GreenChannel,
        )),
    };
    let warped = crate::augment::warp_image(&src_gray, &transform, 0.0)?;
    save_image(&warped, &args.out.with_extension("warped.pgm"))?;
    if args.debug {
        let tgt_gray = match &target {
            ImageData::Gray(g) => crate::imageops::standardize(g),
            ImageData::Rgb(c) => crate::imageops::standardize(&crate::imageops::to_gray(
                c,
                crate::imageops::GrayMode::GreenChannel,
            )),
        };
        let overlay = checkerboard(&tgt_gray, &warped, 16);
        save_image(&overlay, &args.out.with_extension("overlay.pgm"))?;
    }
    let t_norm = (m[2] * m[2] + m[5] * m[5]).sqrt();
    println!(
        "transform written; translation magnitude {t_norm:.2} px, det {:.4}",
        transform.det()
    );
    Ok(())
}

/// Exit codes: 0 success, 2 usage (from clap), 3 data/config errors,
/// 4 numeric/degenerate failures.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::MissingFile(_)
        | Error::MalformedGroundTruth { .. }
        | Error::UnknownCategory { .. }
        | Error::UnsupportedFormat { .. }
        | Error::CorruptFile { .. }
        | Error::IoFailure { .. }
        | Error::ConfigMismatch(_)
        | Error::InvalidConfig(_)
        | Error::EmptyDataset
        | Error::DatasetTooSmall(..) => 3,
        Error::SingularTransform { .. }
        | Error::DimensionMismatch(..)
        | Error::ImageTooSmall { .. }
        | Error::CountMismatch(..)
        | Error::DegeneratePointSet
        | Error::DegenerateConfiguration(_)
        | Error::ShapeMismatch(_)
        | Error::InconsistentShapes { .. } => 4,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Register(args) => cmd_register(args),
    }
}
