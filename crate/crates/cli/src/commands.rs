use std::collections::BTreeMap;
use std::io::{ErrorKind, Write};
use std::path::Path;

use exchanger::checkpoint::{config_hash, Checkpoint};
use exchanger::data::{generate_synthetic, read_dataset_from, write_dataset_to, Dataset, DatasetKind};
use exchanger::scaling::run_scaling;
use exchanger::tensor::write_tensor;
use exchanger::train::{
    evaluate_grids, evaluate_pixel_sets, run_finetune, run_pretrain, Backbone, ClassMetrics, DenseModel, FinetuneInit, Mode,
    PixelSetClassifier, RunMetrics,
};
use exchanger::{Error, Graph, Tensor};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{self, BenchRunConfig, GenDataConfig, TrainRunConfig};
use crate::output::{blob_hash, file_hash, Manifest, Staged};
use crate::{CliError, Command, Common};

pub const PIXEL_SET_FILE: &str = "pixel_sets.sits";
pub const GRID_FILE: &str = "grids.sits";
pub const CHECKPOINT_FILE: &str = "checkpoint.exck";
pub const LAST_GOOD_FILE: &str = "last_good.exck";

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { common, out } => gen_data(&common, &out),
        Command::Pretrain { common, data, val, out } => train(&common, Mode::Pretrain, &data, val.as_deref(), None, &out),
        Command::Finetune { common, data, val, checkpoint, out } => {
            let mode = if checkpoint.is_some() { Mode::FinetunePretrained } else { Mode::FinetuneScratch };
            train(&common, mode, &data, val.as_deref(), checkpoint.as_deref(), &out)
        }
        Command::Eval { common, checkpoint, data, out } => eval(&common, &checkpoint, &data, out.as_deref()),
        Command::Bench { common, out } => bench(&common, &out),
        Command::ExportFeatures { common, checkpoint, data, limit, out } => export_features(&common, &checkpoint, &data, limit, &out),
    }
}

fn manifest<C: Serialize>(command: &str, config: &C, seed: u64, dataset_hash: Option<String>, inputs: BTreeMap<String, String>) -> Result<Manifest, CliError> {
    Ok(Manifest {
        command: command.to_string(),
        status: "ok".to_string(),
        config_hash: config_hash(config)?,
        config: serde_json::to_value(config)?,
        seed,
        dataset_hash,
        inputs,
        artifacts: BTreeMap::new(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

fn dataset_bytes(ds: &Dataset) -> Result<Vec<u8>, CliError> {
    let mut bytes = Vec::new();
    write_dataset_to(&mut bytes, ds)?;
    Ok(bytes)
}

/// Reads a dataset file and returns it with its blob hash.
fn read_data(path: &Path) -> Result<(Dataset, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let ds = read_dataset_from(&bytes[..])?;
    Ok((ds, blob_hash(&bytes)))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn label(path: &Path) -> String {
    path.display().to_string()
}

fn gen_data(common: &Common, out: &Path) -> Result<(), CliError> {
    let mut cfg: GenDataConfig = config::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let set = generate_synthetic(&cfg.synth, cfg.n_samples, cfg.seed)?;
    let mut staged = Staged::new(out, common.force)?;
    let hash = staged.write(PIXEL_SET_FILE, &dataset_bytes(&set.pixel_sets)?)?;
    if cfg.synth.n_grids > 0 {
        staged.write(GRID_FILE, &dataset_bytes(&set.grids)?)?;
    }
    let m = manifest("gen-data", &cfg, cfg.seed, Some(hash), BTreeMap::new())?;
    let dir = staged.commit(m)?;
    println!(
        "wrote {} pixel sets and {} grids to {}",
        set.pixel_sets.len(),
        set.grids.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    initial_train_loss: f64,
    epochs: usize,
    final_train_loss: Option<f64>,
    final_val: Option<&'a ClassMetrics>,
}

fn write_metrics(staged: &mut Staged, metrics: &RunMetrics) -> Result<(), CliError> {
    let mut csv = Vec::new();
    metrics.write_csv(&mut csv)?;
    staged.write("metrics.csv", &csv)?;
    let summary = TrainSummary {
        initial_train_loss: metrics.initial_train_loss,
        epochs: metrics.epochs.len(),
        final_train_loss: metrics.last().map(|e| e.train_loss),
        final_val: metrics.final_val(),
    };
    staged.write("summary.json", &serde_json::to_vec_pretty(&summary)?)?;
    Ok(())
}

fn train(common: &Common, mode: Mode, data: &Path, val: Option<&Path>, pretrained: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let mut cfg: TrainRunConfig = config::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.train.mode = mode;
    let (train_ds, hash) = read_data(data)?;
    let mut inputs = BTreeMap::from([(label(data), hash.clone())]);
    let val_ds = match val {
        Some(p) => {
            let (ds, h) = read_data(p)?;
            inputs.insert(label(p), h);
            Some(ds)
        }
        None => None,
    };
    let expected = if mode == Mode::Pretrain { DatasetKind::PixelSet } else { DatasetKind::Grid };
    for ds in std::iter::once(&train_ds).chain(val_ds.as_ref()) {
        if ds.kind() != expected {
            return Err(CliError::Data(format!("{mode:?} needs a {expected:?} dataset, got {:?}", ds.kind())));
        }
    }
    let init = match pretrained {
        Some(p) => {
            inputs.insert(label(p), file_hash(p)?);
            FinetuneInit::Pretrained(load_checkpoint(p)?.params)
        }
        None => FinetuneInit::Scratch,
    };
    let command = if mode == Mode::Pretrain { "pretrain" } else { "finetune" };
    let mut m = manifest(command, &cfg, cfg.train.seed, Some(hash), inputs)?;
    let mut staged = Staged::new(out, common.force)?;

    let result = if mode == Mode::Pretrain {
        run_pretrain(&train_ds, val_ds.as_ref(), &cfg.model, &cfg.train).map(|o| (o.checkpoint, o.metrics))
    } else {
        run_finetune(&train_ds, val_ds.as_ref(), &cfg.model, &cfg.train, &init, None).map(|o| (o.checkpoint, o.metrics))
    };
    match result {
        Ok((checkpoint, metrics)) => {
            checkpoint.save(staged.path(CHECKPOINT_FILE))?;
            staged.register(CHECKPOINT_FILE)?;
            write_metrics(&mut staged, &metrics)?;
            let dir = staged.commit(m)?;
            if let Some(last) = metrics.last() {
                let val = last.val.as_ref().map(|v| format!(", val F1 {:.2} mIoU {:.2}", v.f1, v.miou)).unwrap_or_default();
                println!("epoch {}: train loss {:.4}{val}", last.epoch, last.train_loss);
            }
            println!("wrote {}", dir.display());
            Ok(())
        }
        Err(Error::Diverged { message, last_good }) => {
            if let Some(ck) = last_good {
                ck.save(staged.path(LAST_GOOD_FILE))?;
                staged.register(LAST_GOOD_FILE)?;
            }
            m.status = format!("diverged: {message}");
            let dir = staged.commit(m)?;
            eprintln!("last finite state kept in {}", dir.display());
            Err(Error::Diverged { message, last_good: None }.into())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct EvalReport {
    kind: DatasetKind,
    samples: usize,
    loss: f64,
    metrics: ClassMetrics,
}

fn eval(common: &Common, checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let mut gamma = exchanger::train::TrainConfig::default().focal_gamma;
    if let Some(path) = &common.config {
        let cfg: TrainRunConfig = config::load(Some(path))?;
        let hash = config_hash(&cfg.model)?;
        if hash != ck.manifest.config_hash {
            return Err(CliError::Config(format!(
                "checkpoint was produced by model config {}, but {} describes {hash}",
                ck.manifest.config_hash,
                path.display()
            )));
        }
        gamma = cfg.train.focal_gamma;
    }
    let (ds, hash) = read_data(data)?;
    let (loss, metrics) = match ds.kind() {
        DatasetKind::PixelSet => {
            let (model, store) = PixelSetClassifier::from_checkpoint(&ck)?;
            check_meta(&ds, model.config.channels)?;
            evaluate_pixel_sets(&model, &store, &ds)?
        }
        DatasetKind::Grid => {
            let (model, store) = DenseModel::from_checkpoint(&ck)?;
            check_meta(&ds, model.config.channels)?;
            evaluate_grids(&model, &store, &ds, gamma)?
        }
    };
    let report = EvalReport { kind: ds.kind(), samples: ds.len(), loss, metrics };
    let json = serde_json::to_vec_pretty(&report)?;
    let mut stdout = std::io::stdout().lock();
    match stdout.write_all(&json).and_then(|()| stdout.write_all(b"\n")) {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => return Err(e.into()),
        _ => {}
    }
    if let Some(out) = out {
        let mut staged = Staged::new(out, common.force)?;
        staged.write("metrics.json", &json)?;
        let inputs = BTreeMap::from([(label(data), hash.clone()), (label(checkpoint), file_hash(checkpoint)?)]);
        let mut m = manifest("eval", &ck.manifest.config, common.seed.unwrap_or(0), Some(hash), inputs)?;
        m.config_hash = ck.manifest.config_hash.clone();
        staged.commit(m)?;
    }
    Ok(())
}

fn check_meta(ds: &Dataset, channels: usize) -> Result<(), CliError> {
    if ds.meta.channels != channels {
        return Err(CliError::Data(format!("dataset has {} channels, model expects {channels}", ds.meta.channels)));
    }
    Ok(())
}

fn bench(common: &Common, out: &Path) -> Result<(), CliError> {
    let mut cfg: BenchRunConfig = config::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.timing.seed = seed;
    }
    let mut staged = Staged::new(out, common.force)?;
    let report = run_scaling(&cfg.encoders, &cfg.t_list, &cfg.exchanger, &cfg.timing)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    staged.write("bench.csv", &csv)?;
    staged.write("slopes.json", &serde_json::to_vec_pretty(&report.slopes)?)?;
    for s in &report.slopes {
        println!("{}: measured slope {:.3}, analytic {:.3}", s.encoder.name(), s.measured, s.analytic);
    }
    let m = manifest("bench", &cfg, cfg.timing.seed, None, BTreeMap::new())?;
    staged.commit(m)?;
    Ok(())
}

#[derive(Serialize)]
struct FeatureEntry {
    sample: usize,
    parcel_id: u32,
    label: usize,
    timestamps: Vec<f32>,
    valid: Vec<bool>,
}

#[derive(Serialize)]
struct FeatureIndex {
    stages: usize,
    d: usize,
    /// Blocks in `features.bin`: per sample, one `[T, d]` tensor per stage.
    samples: Vec<FeatureEntry>,
}

/// Mean over the leading (pixel) axis of `[N, T, d]`.
fn pixel_mean(t: &Tensor<f32>) -> Result<Tensor<f32>, CliError> {
    let (n, rest) = (t.shape()[0], t.shape()[1..].to_vec());
    let len: usize = rest.iter().product();
    let mut out = vec![0.0f32; len];
    for chunk in t.data().chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, &x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= n as f32);
    Ok(Tensor::new(&rest, out)?)
}

fn export_features(common: &Common, checkpoint: &Path, data: &Path, limit: Option<usize>, out: &Path) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let (backbone, store) = Backbone::from_checkpoint(&ck)?;
    let (ds, hash) = read_data(data)?;
    let samples = ds
        .pixel_sets()
        .map_err(|_| CliError::Data("export-features needs a pixel-set dataset".into()))?;
    let cfg: exchanger::train::ModelConfig = ck.config()?;
    check_meta(&ds, cfg.channels)?;
    let n = limit.unwrap_or(samples.len()).min(samples.len());
    let mut staged = Staged::new(out, common.force)?;

    let features: Vec<Result<Vec<Tensor<f32>>, CliError>> = samples[..n]
        .par_iter()
        .map(|s| {
            let mut g = Graph::<f32>::new();
            let stages = backbone.encode_stages(&mut g, &store, &s.pixel_series(), &s.time)?;
            stages.iter().map(|&v| pixel_mean(g.value(v))).collect()
        })
        .collect();
    let mut bin = Vec::new();
    for blocks in features {
        for t in blocks? {
            write_tensor(&mut bin, &t)?;
        }
    }
    staged.write("features.bin", &bin)?;
    let index = FeatureIndex {
        stages: cfg.exchanger.stages,
        d: cfg.exchanger.d,
        samples: samples[..n]
            .iter()
            .enumerate()
            .map(|(i, s)| FeatureEntry {
                sample: i,
                parcel_id: s.parcel_id,
                label: s.label,
                timestamps: s.time.timestamps.clone(),
                valid: s.time.valid.clone(),
            })
            .collect(),
    };
    staged.write("features.json", &serde_json::to_vec_pretty(&index)?)?;
    let inputs = BTreeMap::from([(label(data), hash.clone()), (label(checkpoint), file_hash(checkpoint)?)]);
    let mut m = manifest("export-features", &ck.manifest.config, common.seed.unwrap_or(0), Some(hash), inputs)?;
    m.config_hash = ck.manifest.config_hash.clone();
    let dir = staged.commit(m)?;
    println!("wrote {n} samples x {} stages to {}", cfg.exchanger.stages, dir.display());
    Ok(())
}

