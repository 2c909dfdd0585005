//! Command-line front end.
//!
//! Every subcommand also reads an optional `--config FILE` of `key=value`
//! lines whose keys are long flag names (`alpha=0.2`, `baseline=true`).
//! Flags given on the command line win.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::backbone::BackboneConfig;
use crate::dataset::{self, netpbm, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckOptions};
use crate::heads::{self, HeadConfig};
use crate::oel;
use crate::rng::Rng;
use crate::tensor::{OpKind, Tensor};
use crate::trainer::checkpoint::parse_key_values;
use crate::trainer::eval::{self, EvalMode};
use crate::trainer::{self, Checkpoint, LrDecay, TrainConfig, Trainer, METRICS_HEADER};

#[derive(Debug, Parser)]
#[command(name = "lio", version, about = "Train and inspect CNN classifiers with detachable object-extent heads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic shapes dataset to disk.
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a metrics CSV.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Dump predicted, pseudo and ground-truth masks of one image as PGM.
    #[command(args_override_self = true)]
    VizMask(VizArgs),
    /// Verify analytic gradients against finite differences.
    #[command(args_override_self = true)]
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 250)]
    pub per_class: usize,
    /// Validation images per class (defaults to --per-class / 4, rounded up).
    #[arg(long)]
    pub val_per_class: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 3.0)]
    pub clutter: f64,
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub rotation_min: f64,
    #[arg(long, default_value_t = 360.0)]
    pub rotation_max: f64,
    #[arg(long, default_value_t = 0.5)]
    pub scale_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub scale_max: f64,
    /// Object radius at scale 1, as a fraction of the image side.
    #[arg(long, default_value_t = 0.35)]
    pub radius: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (with train/ and val/, or class folders).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 3)]
    pub positives: usize,
    /// Grid sides of the stages carrying heads, e.g. "8" or "16,8".
    #[arg(long, default_value = "8", value_parser = parse_list)]
    pub stages: List,
    #[arg(long, default_value_t = 32)]
    pub proj_channels: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.02)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Step decay as "EVERY,FACTOR" (e.g. "15,0.1"), or "none".
    #[arg(long, default_value = "none")]
    pub lr_decay: String,
    /// Global gradient-norm clip; 0 disables it.
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Input side; images are resized on load.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Backbone stage channels.
    #[arg(long, default_value = "16,32,64", value_parser = parse_list)]
    pub channels: List,
    /// Plain classifier reference: forces alpha = beta = 0.
    #[arg(long)]
    pub baseline: bool,
    /// Regress the mask head onto ground-truth masks instead of pseudo masks.
    #[arg(long)]
    pub gm: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split directory of class folders, or a dataset root (its val/ is used).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "accuracy", value_parser = parse_mode)]
    pub mode: EvalMode,
    /// Append the metrics row to this CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split directory holding the image and its same-class positives.
    #[arg(long)]
    pub data: PathBuf,
    /// Sample index within the split.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Positive counts to render pseudo masks for.
    #[arg(long, default_value = "3", value_parser = parse_list)]
    pub p_sweep: List,
    /// Grid side of the stage to render (defaults to the first attached stage).
    #[arg(long)]
    pub stage: Option<usize>,
    /// Each mask cell becomes a SCALE x SCALE block.
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test hook: corrupt the backward rule of this operation.
    #[arg(long, value_parser = parse_op)]
    pub fault: Option<OpKind>,
}

/// Comma-separated sizes. A single value rather than a repeated flag, so a
/// later occurrence replaces an earlier one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct List(pub Vec<usize>);

fn parse_list(s: &str) -> std::result::Result<List, String> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| format!("expected comma-separated integers, got `{s}`")))
        .collect::<std::result::Result<_, _>>()
        .map(List)
}

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    s.parse()
}

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    s.parse()
}

/// Inserts `--key value` pairs from a `--config` file ahead of the command
/// line flags, so that explicit flags override them.
fn expand_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let path = strs.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            strs.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    });
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let map = parse_key_values(&text).map_err(|e| format!("{path}: {e}"))?;
    let mut injected = Vec::new();
    for (k, v) in map {
        match v.as_str() {
            "true" => injected.push(format!("--{k}")),
            "false" => {}
            _ => injected.push(format!("--{k}={v}")),
        }
    }
    // after the program name and subcommand
    let at = 2.min(args.len());
    let mut out: Vec<OsString> = args[..at].to_vec();
    out.extend(injected.into_iter().map(OsString::from));
    out.extend(args[at..].iter().cloned());
    Ok(out)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_from_args(args: Vec<OsString>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenData(a) => gen_data(&a).map(|_| 0),
        Command::Train(a) => train(&a).map(|_| 0),
        Command::Eval(a) => evaluate(&a).map(|_| 0),
        Command::VizMask(a) => viz_mask(&a).map(|_| 0),
        Command::GradCheck(a) => grad_check(&a),
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        train_per_class: a.per_class,
        val_per_class: a.val_per_class.unwrap_or(a.per_class.div_ceil(4)),
        image_size: a.size,
        clutter_density: a.clutter,
        rotation: (a.rotation_min, a.rotation_max),
        scale: (a.scale_min, a.scale_max),
        object_radius: a.radius,
        noise: a.noise,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    spec.validate()?;
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() && !a.force {
        return Err(Error::contract(format!(
            "output directory {} is not empty (use --force to write into it)",
            a.out.display()
        )));
    }
    let d = dataset::generate(&spec)?;
    dataset::write_dataset(&a.out, &[("train", &d.train), ("val", &d.val)])?;
    println!(
        "wrote {} train and {} val images to {}",
        d.train.len(),
        d.val.len(),
        a.out.display()
    );
    Ok(())
}

pub fn train_config(a: &TrainArgs, num_classes: usize) -> Result<TrainConfig> {
    let lr_decay = match a.lr_decay.as_str() {
        "none" => None,
        s => {
            let bad = || Error::contract(format!("--lr-decay expects EVERY,FACTOR, got `{s}`"));
            let (e, f) = s.split_once(',').ok_or_else(bad)?;
            Some(LrDecay {
                every: e.trim().parse().map_err(|_| bad())?,
                factor: f.trim().parse().map_err(|_| bad())?,
            })
        }
    };
    let backbone = BackboneConfig {
        input_size: a.size,
        stage_strides: vec![2; a.channels.0.len()],
        channels: a.channels.0.clone(),
        num_classes,
        seed: a.seed,
        ..BackboneConfig::default()
    };
    let (alpha, beta) = if a.baseline { (0.0, 0.0) } else { (a.alpha, a.beta) };
    let cfg = TrainConfig {
        backbone,
        heads: Some(HeadConfig {
            stages: a.stages.0.clone(),
            proj_channels: a.proj_channels,
        }),
        alpha,
        beta,
        positives: a.positives,
        batch_size: a.batch_size,
        epochs: a.epochs,
        lr: a.lr,
        momentum: a.momentum,
        lr_decay,
        grad_clip: (a.grad_clip > 0.0).then_some(a.grad_clip),
        seed: a.seed,
        gt_mask: a.gm,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<Trainer> {
    let (train, val) = dataset::load_splits(&a.data, a.size)?;
    let cfg = train_config(a, train.num_classes())?;
    if cfg.gt_mask && !train.has_masks() {
        return Err(Error::contract("--gm needs ground-truth masks on the training data"));
    }
    info!(
        "training on {} images ({} classes), backbone {} params, heads {} params",
        train.len(),
        train.num_classes(),
        cfg.backbone.parameter_count(),
        heads::parameter_count(&cfg.backbone, cfg.heads.as_ref())? - cfg.backbone.parameter_count()
    );
    let mut t = Trainer::new(cfg)?;
    let history = t.fit(&train, val.as_ref(), Some(&a.out))?;
    if let Some(last) = history.last() {
        println!(
            "epoch {}: total {:.4}, train acc {:.4}, val acc {}, mask IoU {}",
            last.epoch,
            last.losses.total,
            last.train_accuracy,
            last.val_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
            last.mask_iou.map_or("-".into(), |v| format!("{v:.4}")),
        );
    }
    println!("checkpoint: {}", a.out.join("final.lioc").display());
    Ok(t)
}

fn eval_split(path: &Path, size: usize) -> Result<Dataset> {
    let (train, val) = dataset::load_splits(path, size)?;
    Ok(if path.join("train").is_dir() { val.unwrap_or(train) } else { train })
}

pub fn evaluate(a: &EvalArgs) -> Result<eval::Metrics> {
    let ck = match a.mode {
        EvalMode::Accuracy => Checkpoint::load_backbone(&a.checkpoint)?,
        EvalMode::MaskIou => Checkpoint::load(&a.checkpoint)?,
    };
    let data = eval_split(&a.data, ck.config.backbone.input_size)?;
    let m = trainer::evaluate(&data, &ck, a.mode)?;
    match a.mode {
        EvalMode::Accuracy => println!("accuracy {:.6} ({} images)", m.accuracy.unwrap_or(f64::NAN), m.samples),
        EvalMode::MaskIou => println!("mask-iou {:.6} ({} images)", m.mask_iou.unwrap_or(f64::NAN), m.samples),
    }
    if let Some(out) = &a.out {
        let fresh = !out.exists();
        let file = fs::OpenOptions::new().create(true).append(true).open(out)?;
        let mut w = csv::Writer::from_writer(file);
        let err = |e: csv::Error| Error::format(out, e.to_string());
        if fresh {
            w.write_record(METRICS_HEADER).map_err(err)?;
        }
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let mut row = vec![ck.epoch.to_string()];
        row.extend(std::iter::repeat_n(String::new(), 7));
        row.push(opt(m.accuracy));
        row.push(opt(m.mask_iou));
        w.write_record(&row).map_err(err)?;
        w.flush()?;
    }
    Ok(m)
}

/// Min-max scales `values` to 0..=255 and enlarges each cell to a block.
pub fn mask_to_gray(mask: &Tensor, scale: usize) -> (usize, Vec<u8>) {
    let n = mask.shape()[0];
    let (lo, hi) = mask
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let side = n * scale;
    let mut out = vec![0u8; side * side];
    for (p, px) in out.iter_mut().enumerate() {
        let (y, x) = (p / side / scale, (p % side) / scale);
        let v = mask.data()[y * n + x];
        *px = if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
    }
    (side, out)
}

pub fn viz_mask(a: &VizArgs) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let bcfg = ck.config.seeded_backbone();
    let side = match a.stage {
        Some(s) => s,
        None => *ck
            .config
            .stages()
            .first()
            .ok_or_else(|| Error::contract("checkpoint has no mask head"))?,
    };
    let data = eval_split(&a.data, bcfg.input_size)?;
    let sample = data
        .samples
        .get(a.index)
        .ok_or_else(|| Error::contract(format!("index {} out of range ({} images)", a.index, data.len())))?;
    let image = sample.image_tensor(data.image_size);
    fs::create_dir_all(&a.out)?;
    let mut written = Vec::new();
    let mut panels = Vec::new();
    let mut save = |name: String, mask: &Tensor, panels: &mut Vec<Vec<u8>>| -> Result<()> {
        let (s, gray) = mask_to_gray(mask, a.scale);
        let path = a.out.join(name);
        netpbm::write_pgm(&path, s, s, &gray)?;
        written.push(path);
        panels.push(gray);
        Ok(())
    };

    let m_pred = eval::predicted_mask(&bcfg, &ck.params, &image, side)?;
    save("m_pred.pgm".into(), &m_pred, &mut panels)?;

    let anchor = eval::stage_grid(&bcfg, &ck.params, &image, side)?;
    let groups = data.indices_by_class();
    for &p in &a.p_sweep.0 {
        if p == 0 {
            return Err(Error::contract("--p-sweep values must be positive"));
        }
        let mut rng = Rng::new(a.seed);
        let picks = trainer::sample_positives(&groups, sample.label, a.index, p, &mut rng);
        let grids = picks
            .iter()
            .map(|&i| eval::stage_grid(&bcfg, &ck.params, &data.samples[i].image_tensor(data.image_size), side))
            .collect::<Result<Vec<_>>>()?;
        let m = oel::pseudo_mask(&anchor, &grids)?;
        save(format!("pseudo_p{p}.pgm"), &m, &mut panels)?;
    }
    if let Some(gt) = &sample.mask {
        let m = dataset::downsample_mask(gt, data.image_size, side)?;
        save("gt.pgm".into(), &m, &mut panels)?;
    }

    // side-by-side strip with a one-pixel gap
    let s = side * a.scale;
    let width = panels.len() * (s + 1) - 1;
    let mut strip = vec![128u8; width * s];
    for (k, panel) in panels.iter().enumerate() {
        for y in 0..s {
            strip[y * width + k * (s + 1)..][..s].copy_from_slice(&panel[y * s..][..s]);
        }
    }
    let path = a.out.join("panel.pgm");
    netpbm::write_pgm(&path, width, s, &strip)?;
    written.push(path);
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}

pub fn grad_check(a: &GradCheckArgs) -> Result<i32> {
    let report = gradcheck::run(&GradCheckOptions {
        instances: a.instances,
        step: a.step,
        tolerance: a.tolerance,
        seed: a.seed,
        fault: a.fault,
        ..GradCheckOptions::default()
    })?;
    println!("{report}");
    if report.passed() {
        Ok(0)
    } else {
        eprintln!("failing checks: {}", report.failures().join(", "));
        Ok(1)
    }
}
