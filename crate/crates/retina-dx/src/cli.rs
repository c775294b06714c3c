//! Command-line front end: `preprocess`, `train`, `eval`, `predict` and
//! `gradcheck` subcommands over one JSON run configuration.
//!
//! Exit codes: 0 success, 1 a check or accuracy gate failed, 2 usage or
//! I/O trouble. Command-line flags override fields from `--config`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, write_tensor_record};
use crate::clahe::ClaheParams;
use crate::data::{load_manifest, split_80_20, DatasetManifest, Label};
use crate::error::{Error, Result};
use crate::gradcheck::grad_check;
use crate::image::preprocess;
use crate::layers::{build_network, Mode, NetworkConfig};
use crate::pnm;
use crate::train::{train_with_callback, LabeledSet, TrainingConfig};

/// Everything one run needs, loadable from a JSON file. Any field a flag
/// also covers is overridden by the flag.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Base directory manifest paths are relative to; defaults to the
    /// manifest file's own directory.
    pub dataset_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub clahe: ClaheParams,
    /// Side length the network consumes; images are resized to this square.
    pub input_size: usize,
    /// Named architecture preset, unless `network_file` supplies a full one.
    pub preset: String,
    pub network_file: Option<PathBuf>,
    pub training: TrainingConfig,
    pub out_dir: PathBuf,
    /// Master seed. When set it overrides `training.seed`; every random
    /// choice (weights, dropout, split, shuffles) derives from one seed.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            manifest: None,
            clahe: ClaheParams::default(),
            input_size: 64,
            preset: "table1".into(),
            network_file: None,
            training: TrainingConfig::default(),
            out_dir: PathBuf::from("out"),
            seed: None,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "retina-dx",
    version,
    about = "Fundus-image screening: preprocessing, training and inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct CommonArgs {
    /// JSON run-configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset manifest (CSV of path,label rows).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory manifest paths are relative to.
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
    /// Network input side length.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Architecture preset name.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to predict with.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (PPM or PGM).
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Architecture preset to check (a reduced variant is substituted for
    /// presets too deep to finite-difference in reasonable time).
    #[arg(long, default_value = "table1")]
    pub preset: String,
    /// Maximum acceptable relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Decode, crop, enhance and resize every manifest image to tensors.
    Preprocess(CommonArgs),
    /// Train on the manifest's 80% split, validating on the held-out 20%.
    Train(TrainArgs),
    /// Score a checkpoint over a labeled manifest.
    Eval(EvalArgs),
    /// Classify one image.
    Predict(PredictArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Merges the config file (if any) with flags; flags win. The master seed
/// is pushed down into `training.seed` so one number drives everything.
fn resolve(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &common.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &common.manifest {
        cfg.manifest = Some(v.clone());
    }
    if let Some(v) = &common.dataset_root {
        cfg.dataset_root = Some(v.clone());
    }
    if let Some(v) = &common.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = common.input_size {
        cfg.input_size = v;
    }
    if let Some(v) = &common.preset {
        cfg.preset = v.clone();
    }
    if let Some(v) = common.seed {
        cfg.seed = Some(v);
    }
    let seed = cfg.seed.unwrap_or(cfg.training.seed);
    cfg.seed = Some(seed);
    cfg.training.seed = seed;
    Ok(cfg)
}

fn require_manifest(cfg: &RunConfig) -> Result<&PathBuf> {
    cfg.manifest
        .as_ref()
        .ok_or_else(|| Error::InvalidParam("a manifest is required (--manifest FILE)".into()))
}

fn base_dir(cfg: &RunConfig, manifest_path: &Path) -> PathBuf {
    cfg.dataset_root.clone().unwrap_or_else(|| {
        manifest_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf()
    })
}

fn network_config(cfg: &RunConfig) -> Result<NetworkConfig> {
    match &cfg.network_file {
        Some(path) => Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?),
        None => {
            let mut nc = NetworkConfig::preset(&cfg.preset)?;
            nc.input = [3, cfg.input_size, cfg.input_size];
            Ok(nc)
        }
    }
}

/// Output file name for one preprocessed image: the relative source path
/// with separators flattened, plus the tensor-record extension.
fn tensor_file_name(rel: &str) -> String {
    format!("{}.rdxt", rel.replace(['/', '\\'], "_"))
}

fn load_set(
    manifest: &DatasetManifest,
    base: &Path,
    clahe: &ClaheParams,
    input_size: usize,
    indices: &[usize],
) -> Result<LabeledSet> {
    let mut set = LabeledSet::new();
    for &i in indices {
        let (rel, label) = &manifest.entries[i];
        let img = pnm::read_file(&base.join(rel))?;
        let t = preprocess(&img, clahe, input_size)?;
        set.push(t, label.index())?;
    }
    Ok(set)
}

fn cmd_preprocess(cfg: &RunConfig) -> Result<i32> {
    let manifest_path = require_manifest(cfg)?;
    let manifest = load_manifest(manifest_path)?;
    let base = base_dir(cfg, manifest_path);
    std::fs::create_dir_all(&cfg.out_dir)?;

    let mut index = String::from("source,output,label\n");
    let mut failures = 0usize;
    for (rel, label) in &manifest.entries {
        let result = pnm::read_file(&base.join(rel))
            .and_then(|img| preprocess(&img, &cfg.clahe, cfg.input_size));
        match result {
            Ok(t) => {
                let out_name = tensor_file_name(rel);
                write_tensor_record(&cfg.out_dir.join(&out_name), rel, &t)?;
                index.push_str(&format!("{rel},{out_name},{}\n", label.token()));
            }
            Err(e) => {
                eprintln!("error: {rel}: {e}");
                failures += 1;
            }
        }
    }
    std::fs::write(cfg.out_dir.join("index.csv"), index)?;
    println!(
        "preprocessed {} of {} images into {}",
        manifest.len() - failures,
        manifest.len(),
        cfg.out_dir.display()
    );
    Ok(if failures > 0 { 2 } else { 0 })
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let mut cfg = resolve(&args.common)?;
    if let Some(v) = args.epochs {
        cfg.training.max_epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.training.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.training.initial_lr = v;
    }

    let manifest_path = require_manifest(&cfg)?;
    let manifest = load_manifest(manifest_path)?;
    let base = base_dir(&cfg, manifest_path);
    let seed = cfg.training.seed;

    let split = split_80_20(&manifest, seed)?;
    let train_set = load_set(&manifest, &base, &cfg.clahe, cfg.input_size, &split.train)?;
    let val_set = load_set(&manifest, &base, &cfg.clahe, cfg.input_size, &split.test)?;

    let nc = network_config(&cfg)?;
    let mut net = build_network::<f32>(&nc, seed)?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    // Track the best validation epoch as training goes; ties keep the
    // earliest epoch because only strict improvement replaces the snapshot.
    let mut best: Option<(f64, usize, Vec<u8>)> = None;
    let records = train_with_callback(
        &mut net,
        &train_set,
        &val_set,
        &cfg.training,
        |net, record| {
            if let Some(va) = record.val_accuracy {
                if best.as_ref().map_or(true, |(bva, _, _)| va > *bva) {
                    best = Some((va, record.epoch, checkpoint_bytes(net)?));
                }
            }
            Ok(())
        },
    )?;

    save_checkpoint(&net, &cfg.out_dir.join("model.rdxc"))?;
    let best_bytes = match &best {
        Some((_, _, bytes)) => bytes.clone(),
        None => checkpoint_bytes(&net)?,
    };
    std::fs::write(cfg.out_dir.join("model.best.rdxc"), best_bytes)?;

    let mut csv = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
    for r in &records {
        let val = r.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{val}\n",
            r.epoch, r.lr, r.train_loss, r.train_accuracy
        ));
    }
    std::fs::write(cfg.out_dir.join("metrics.csv"), csv)?;

    let last = records.last().expect("at least one epoch");
    match (&best, last.val_accuracy) {
        (Some((bva, bep, _)), Some(lva)) => {
            println!("final val_acc {lva:.4} (epoch {}); best val_acc {bva:.4} (epoch {bep})", last.epoch)
        }
        _ => println!("final train_acc {:.4} (epoch {})", last.train_accuracy, last.epoch),
    }
    Ok(0)
}

/// Argmax with ties resolved to the lower class index.
fn predict_row(probs: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let cfg = resolve(&args.common)?;
    let mut net = load_checkpoint(&args.checkpoint)?;
    let input_size = net.config().input[1];

    let manifest_path = require_manifest(&cfg)?;
    let manifest = load_manifest(manifest_path)?;
    if manifest.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let base = base_dir(&cfg, manifest_path);

    let mut csv = String::from("path,label,predicted,p_healthy,p_dr_signs\n");
    let mut confusion = [[0usize; 2]; 2];
    let mut correct = 0usize;
    for (rel, label) in &manifest.entries {
        let img = pnm::read_file(&base.join(rel))?;
        let t = preprocess(&img, &cfg.clahe, input_size)?;
        let mut shape = vec![1usize];
        shape.extend_from_slice(t.shape());
        let x = crate::tensor::Tensor::new(&shape, t.data().to_vec())?;
        let probs = net.forward(&x, Mode::Inference)?;
        let row = &probs.data()[..2];
        let pred = predict_row(row);
        confusion[label.index()][pred] += 1;
        if pred == label.index() {
            correct += 1;
        }
        let pred_label = Label::from_index(pred).expect("binary prediction");
        csv.push_str(&format!(
            "{rel},{},{},{},{}\n",
            label.token(),
            pred_label.token(),
            row[0],
            row[1]
        ));
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("eval.csv"), csv)?;

    let accuracy = correct as f64 / manifest.len() as f64;
    println!("accuracy {accuracy:.4} over {} images", manifest.len());
    println!("confusion (rows true, cols predicted):");
    println!("            healthy  dr_signs");
    println!("healthy    {:>8} {:>9}", confusion[0][0], confusion[0][1]);
    println!("dr_signs   {:>8} {:>9}", confusion[1][0], confusion[1][1]);
    Ok(0)
}

fn cmd_predict(args: &PredictArgs) -> Result<i32> {
    let cfg = resolve(&args.common)?;
    let mut net = load_checkpoint(&args.checkpoint)?;
    let input_size = net.config().input[1];

    let img = pnm::read_file(&args.image)?;
    let t = preprocess(&img, &cfg.clahe, input_size)?;
    let mut shape = vec![1usize];
    shape.extend_from_slice(t.shape());
    let x = crate::tensor::Tensor::new(&shape, t.data().to_vec())?;
    let probs = net.forward(&x, Mode::Inference)?;
    let row = &probs.data()[..2];
    let pred = Label::from_index(predict_row(row)).expect("binary prediction");
    println!("prediction: {}", pred.token());
    println!("p_healthy: {:.6}", row[0]);
    println!("p_dr_signs: {:.6}", row[1]);
    Ok(0)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let config = NetworkConfig::gradcheck_variant(&args.preset)?;
    let report = grad_check(&config, args.tolerance, args.seed)?;
    for p in &report.params {
        println!("{}: max rel err {:.3e}", p.name, p.max_rel_err);
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "gradcheck {verdict}: max rel err {:.3e} vs tolerance {:.1e} ({})",
        report.max_rel_err(),
        report.tolerance,
        config.name
    );
    Ok(if report.passed() { 0 } else { 1 })
}

fn dispatch(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Preprocess(common) => cmd_preprocess(&resolve(common)?),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

/// Parses `std::env::args`, runs the chosen command, and maps every error
/// onto the documented exit codes.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
