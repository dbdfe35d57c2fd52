//! The `foodwaste` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use foodwaste_tensor::{ops, param_count, OptimConfig, ParamSet, Tensor};
use serde::Serialize;
use serde_json::json;

use super::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
use super::dataset::{gen_dataset, write_fwds, write_json_atomic, Dataset, GenConfig, Split};
use super::metrics::{confusion_matrix, matrix_accuracy, EpochRecord, MetricsReport};
use crate::deltanet::{
    predict_classes, train_classifier_with_progress, ClassTrainConfig, DeltaNet, DeltaNetConfig, PairSample,
};
use crate::error::{Error, Result};
use crate::preproc::{mask_union, preprocess_pair, resize_nearest, MaskPredictor, SquareBBox, UNetMasker, TARGET_SIZE};
use crate::scenegen::SceneConfig;
use crate::segnet::{
    evaluate_pixel_accuracy, train_unet_with_progress, MaskSample, SegTrainConfig, UNet, UNetConfig,
};

pub const UNET_CHECKPOINT: &str = "unet.fwwt";
pub const CLASSIFIER_CHECKPOINT: &str = "classifier.fwwt";
pub const METRICS: &str = "metrics.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    PaperScale,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::PaperScale => "paper-scale",
        }
    }

    pub fn unet(self) -> UNetConfig {
        match self {
            Preset::Toy => UNetConfig::toy(),
            Preset::PaperScale => UNetConfig::paper_scale(),
        }
    }

    pub fn classifier(self) -> DeltaNetConfig {
        match self {
            Preset::Toy => DeltaNetConfig::toy(),
            Preset::PaperScale => DeltaNetConfig::paper_scale(),
        }
    }

    /// Default generated-data shape: (image size, classes, episodes, deposits).
    fn data(self) -> (usize, usize, usize, usize) {
        match self {
            Preset::Toy => (64, 5, 100, 5),
            Preset::PaperScale => (224, 20, 200, 5),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Classifier,
    Unet,
}

#[derive(Debug, Parser)]
#[command(name = "foodwaste", version, about = "Food-waste segmentation and before/after classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value = "toy")]
    pub preset: Preset,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic deposit dataset.
    GenData {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        deposits: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train the segmentation network.
    TrainUnet,
    /// Train the before/after classifier.
    TrainClassifier {
        /// FWWT file with the frozen backbone tensors.
        #[arg(long)]
        frozen_weights: Option<PathBuf>,
    },
    /// Crop and scale before/after pairs around the detected food.
    Preprocess {
        /// U-Net checkpoint; ground-truth masks are used without one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = TARGET_SIZE)]
        target: usize,
    },
    /// Evaluate a checkpoint (or a freshly initialised model) on the test split.
    Eval {
        #[arg(long, value_enum, default_value = "classifier")]
        model: Model,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print parameter counts of a preset.
    Params {
        #[arg(long, value_enum, default_value = "classifier")]
        model: Model,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required for this command")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn log_epoch(task: &str, record: &EpochRecord) {
    eprintln!("{}", json!({ "task": task, "epoch": record }));
}

/// Brings images (bilinear) and masks (nearest) to the model resolution.
fn fit_masks(samples: Vec<MaskSample>, size: usize) -> Result<Vec<MaskSample>> {
    samples
        .into_iter()
        .map(|s| {
            if s.image.shape()[1] == size {
                return Ok(s);
            }
            let image = ops::resize_bilinear(&s.image, size, size)?;
            let mask = resize_nearest(&s.mask, size, size)?;
            MaskSample::new(image, mask)
        })
        .collect()
}

fn fit_pairs(samples: Vec<PairSample>, size: usize) -> Result<Vec<PairSample>> {
    samples
        .into_iter()
        .map(|s| {
            if s.before.shape()[1] == size {
                return Ok(s);
            }
            Ok(PairSample {
                before: ops::resize_bilinear(&s.before, size, size)?,
                after: ops::resize_bilinear(&s.after, size, size)?,
                label: s.label,
            })
        })
        .collect()
}

fn check_classes(ds: &Dataset, cfg: &DeltaNetConfig) -> Result<()> {
    if ds.manifest.class_count > cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            ds.manifest.class_count, cfg.num_classes
        )));
    }
    Ok(())
}

fn gen_data(cli: &Cli, episodes: Option<usize>, deposits: Option<usize>, classes: Option<usize>, size: Option<usize>) -> Result<serde_json::Value> {
    let out = required(&cli.out, "out")?;
    let (d_size, d_classes, d_episodes, d_deposits) = cli.preset.data();
    let scene = SceneConfig::new(classes.unwrap_or(d_classes), size.unwrap_or(d_size));
    let cfg = GenConfig::new(cli.seed, episodes.unwrap_or(d_episodes), deposits.unwrap_or(d_deposits), scene);
    let m = gen_dataset(&cfg, out)?;
    let total = m.pairs.train + m.pairs.val + m.pairs.test;
    Ok(json!({
        "command": "gen-data",
        "out": out,
        "pairs": total,
        "mask_samples": total,
        "split": m.pairs,
    }))
}

fn train_unet_cmd(cli: &Cli) -> Result<serde_json::Value> {
    let ds = Dataset::open(required(&cli.data, "data")?)?;
    let out = required(&cli.out, "out")?;
    let (net, params) = UNet::build(cli.preset.unet(), cli.seed)?;
    let size = net.config.input_size;
    let train = fit_masks(ds.mask_samples(Split::Train)?, size)?;
    let val = fit_masks(ds.mask_samples(Split::Val)?, size)?;
    let test = fit_masks(ds.mask_samples(Split::Test)?, size)?;
    let defaults = SegTrainConfig::default();
    let cfg = SegTrainConfig {
        epochs: cli.epochs.unwrap_or(defaults.epochs),
        batch_size: cli.batch_size.unwrap_or(defaults.batch_size),
        optim: OptimConfig::adam(cli.lr.unwrap_or(defaults.optim.lr)),
        seed: cli.seed,
        ..defaults
    };
    let run = train_unet_with_progress(&net, params, &train, &val, &test, &cfg, |e| {
        log_epoch("segmentation", &seg_record(e))
    })?;
    create_dir(out)?;
    save_checkpoint(&run.params, &out.join(UNET_CHECKPOINT))?;
    let report = MetricsReport {
        task: "segmentation".into(),
        preset: cli.preset.name().into(),
        seed: cli.seed,
        epochs: run.history.iter().map(seg_record).collect(),
        test_accuracy: run.test_pixel_accuracy,
        test_samples: test.len(),
        confusion_matrix: None,
    };
    write_json_atomic(&report, &out.join(METRICS))?;
    Ok(json!({ "command": "train-unet", "out": out, "test_pixel_accuracy": run.test_pixel_accuracy }))
}

fn seg_record(e: &crate::segnet::SegEpoch) -> EpochRecord {
    EpochRecord {
        epoch: e.epoch,
        loss: e.loss,
        train_accuracy: e.train_pixel_accuracy,
        val_accuracy: e.val_pixel_accuracy,
    }
}

fn classifier_report(
    cli: &Cli,
    net: &DeltaNet,
    params: &ParamSet<f32>,
    test: &[PairSample],
    batch_size: usize,
    epochs: Vec<EpochRecord>,
) -> Result<MetricsReport> {
    let predicted = predict_classes(net, params, test, batch_size)?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let matrix = confusion_matrix(&predicted, &labels, net.config.num_classes)?;
    Ok(MetricsReport {
        task: "classification".into(),
        preset: cli.preset.name().into(),
        seed: cli.seed,
        epochs,
        test_accuracy: matrix_accuracy(&matrix),
        test_samples: test.len(),
        confusion_matrix: Some(matrix),
    })
}

fn train_classifier_cmd(cli: &Cli, frozen: &Option<PathBuf>) -> Result<serde_json::Value> {
    let ds = Dataset::open(required(&cli.data, "data")?)?;
    let out = required(&cli.out, "out")?;
    let config = cli.preset.classifier();
    check_classes(&ds, &config)?;
    let frozen = frozen.as_deref().map(read_checkpoint).transpose()?;
    let (net, params) = DeltaNet::build(config, frozen.as_ref(), cli.seed)?;
    let size = net.config.input_size;
    let train = fit_pairs(ds.pairs(Split::Train)?, size)?;
    let val = fit_pairs(ds.pairs(Split::Val)?, size)?;
    let test = fit_pairs(ds.pairs(Split::Test)?, size)?;
    let defaults = ClassTrainConfig::default();
    let cfg = ClassTrainConfig {
        epochs: cli.epochs.unwrap_or(defaults.epochs),
        batch_size: cli.batch_size.unwrap_or(defaults.batch_size),
        optim: OptimConfig::adam(cli.lr.unwrap_or(defaults.optim.lr)),
        seed: cli.seed,
    };
    let record = |e: &crate::deltanet::ClassEpoch| EpochRecord {
        epoch: e.epoch,
        loss: e.loss,
        train_accuracy: e.train_accuracy,
        val_accuracy: e.val_accuracy,
    };
    let run = train_classifier_with_progress(&net, params, &train, &val, &cfg, |e| {
        log_epoch("classification", &record(e))
    })?;
    create_dir(out)?;
    save_checkpoint(&run.params, &out.join(CLASSIFIER_CHECKPOINT))?;
    let report = classifier_report(cli, &net, &run.params, &test, cfg.batch_size, run.history.iter().map(record).collect())?;
    write_json_atomic(&report, &out.join(METRICS))?;
    Ok(json!({ "command": "train-classifier", "out": out, "test_accuracy": report.test_accuracy }))
}

#[derive(Serialize)]
struct CropEntry {
    bin_id: u64,
    seq: usize,
    class_id: usize,
    bbox: Option<SquareBBox>,
    before: Option<String>,
    after: Option<String>,
}

fn preprocess_cmd(cli: &Cli, checkpoint: &Option<PathBuf>, split: Split, limit: Option<usize>, target: usize) -> Result<serde_json::Value> {
    let ds = Dataset::open(required(&cli.data, "data")?)?;
    let out = required(&cli.out, "out")?;
    let unet = match checkpoint {
        Some(path) => {
            let (net, template) = UNet::build(cli.preset.unet(), 0)?;
            Some((net, load_checkpoint(path, &template)?))
        }
        None => None,
    };
    create_dir(&out.join("pairs"))?;
    let mut entries = Vec::new();
    let limit = limit.unwrap_or(usize::MAX);
    'episodes: for episode in &ds.manifest.episodes {
        let mut previous_mask: Option<Tensor<f32>> = None;
        for ev in &episode.events {
            let load = |rel: &str| super::dataset::read_fwds(&ds.root.join(rel));
            let mask = load(&ev.mask)?;
            let known = match &previous_mask {
                Some(prev) => mask_union(prev, &mask)?,
                None => mask.clone(),
            };
            previous_mask = Some(mask);
            if ev.split != split {
                continue;
            }
            if entries.len() >= limit {
                break 'episodes;
            }
            let (before, after) = (load(&ev.before)?, load(&ev.after)?);
            let ground_truth = move |_: &Tensor<f32>| -> Result<Tensor<f32>> { Ok(known.clone()) };
            let masker: Box<dyn MaskPredictor + '_> = match &unet {
                Some((net, params)) => Box::new(UNetMasker {
                    net,
                    params,
                    threshold: 0.5,
                }),
                None => Box::new(ground_truth),
            };
            let result = preprocess_pair(&before, &after, masker.as_ref(), target)?;
            let stem = format!("pairs/bin{:05}_seq{:03}", episode.bin_id, ev.seq);
            let mut entry = CropEntry {
                bin_id: episode.bin_id,
                seq: ev.seq,
                class_id: ev.class_id,
                bbox: None,
                before: None,
                after: None,
            };
            if let Some(pair) = result {
                let (b, a) = (format!("{stem}_before.fwds"), format!("{stem}_after.fwds"));
                write_fwds(&pair.before, &out.join(&b))?;
                write_fwds(&pair.after, &out.join(&a))?;
                entry.bbox = Some(pair.bbox);
                entry.before = Some(b);
                entry.after = Some(a);
            }
            entries.push(entry);
        }
    }
    let cropped = entries.iter().filter(|e| e.bbox.is_some()).count();
    write_json_atomic(
        &json!({ "target": target, "masks": if unet.is_some() { "unet" } else { "ground-truth" }, "pairs": entries }),
        &out.join("preprocess.json"),
    )?;
    Ok(json!({ "command": "preprocess", "out": out, "pairs": entries.len(), "cropped": cropped }))
}

fn eval_cmd(cli: &Cli, model: Model, checkpoint: &Option<PathBuf>) -> Result<serde_json::Value> {
    let ds = Dataset::open(required(&cli.data, "data")?)?;
    let batch_size = cli.batch_size.unwrap_or(16);
    let report = match model {
        Model::Classifier => {
            let config = cli.preset.classifier();
            check_classes(&ds, &config)?;
            let (net, mut params) = DeltaNet::build(config, None, cli.seed)?;
            if let Some(path) = checkpoint {
                params = load_checkpoint(path, &params)?;
            }
            let test = fit_pairs(ds.pairs(Split::Test)?, net.config.input_size)?;
            classifier_report(cli, &net, &params, &test, batch_size, Vec::new())?
        }
        Model::Unet => {
            let (net, mut params) = UNet::build(cli.preset.unet(), cli.seed)?;
            if let Some(path) = checkpoint {
                params = load_checkpoint(path, &params)?;
            }
            let test = fit_masks(ds.mask_samples(Split::Test)?, net.config.input_size)?;
            MetricsReport {
                task: "segmentation".into(),
                preset: cli.preset.name().into(),
                seed: cli.seed,
                epochs: Vec::new(),
                test_accuracy: evaluate_pixel_accuracy(&net, &params, &test, batch_size, 0.5)?,
                test_samples: test.len(),
                confusion_matrix: None,
            }
        }
    };
    if let Some(out) = &cli.out {
        create_dir(out)?;
        write_json_atomic(&report, &out.join(METRICS))?;
    }
    Ok(json!({
        "command": "eval",
        "task": report.task,
        "test_accuracy": report.test_accuracy,
        "test_samples": report.test_samples,
    }))
}

fn params_cmd(cli: &Cli, model: Model) -> Result<serde_json::Value> {
    let (name, count) = match model {
        Model::Classifier => ("classifier", param_count(&DeltaNet::build(cli.preset.classifier(), None, 0)?.1)),
        Model::Unet => ("unet", param_count(&UNet::build(cli.preset.unet(), 0)?.1)),
    };
    Ok(json!({
        "model": name,
        "preset": cli.preset.name(),
        "total": count.total,
        "trainable": count.trainable,
        "frozen": count.frozen,
    }))
}

pub fn execute(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::GenData {
            episodes,
            deposits,
            classes,
            image_size,
        } => gen_data(cli, *episodes, *deposits, *classes, *image_size),
        Command::TrainUnet => train_unet_cmd(cli),
        Command::TrainClassifier { frozen_weights } => train_classifier_cmd(cli, frozen_weights),
        Command::Preprocess {
            checkpoint,
            split,
            limit,
            target,
        } => preprocess_cmd(cli, checkpoint, (*split).into(), *limit, *target),
        Command::Eval { model, checkpoint } => eval_cmd(cli, *model, checkpoint),
        Command::Params { model } => params_cmd(cli, *model),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

/// Parses `args`, runs the command and prints a one-line JSON result (or
/// error) so that scripts can consume the output.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail("usage", first, 2);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail("config", "--threads must be >= 1", 1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail("config", &e.to_string(), 1);
        }
    }
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}
