use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{compute_metrics, Confusion, RunMetrics};
use super::model::{ModelConfig, PixelSetClassifier};
use super::trainer::{fit, Evaluation};
use super::{derive_seed, TrainConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{temporal_dropout, Dataset, PixelSetSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::ParamStore;

pub struct PretrainOutput {
    pub model: PixelSetClassifier,
    pub params: ParamStore<f32>,
    pub checkpoint: Checkpoint,
    pub metrics: RunMetrics,
}

fn argmax(xs: &[f32]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn check_labels(samples: &[PixelSetSample], k: usize) -> Result<()> {
    match samples.iter().find(|s| s.label >= k) {
        Some(s) => Err(Error::Data(format!("parcel {} has label {} outside {k} classes", s.parcel_id, s.label))),
        None => Ok(()),
    }
}

/// Mean loss and confusion-based metrics of `model` on a pixel-set dataset.
pub fn evaluate_pixel_sets(
    model: &PixelSetClassifier,
    store: &ParamStore<f32>,
    ds: &Dataset,
) -> Result<(f64, super::ClassMetrics)> {
    let samples = ds.pixel_sets()?;
    let k = model.config.n_classes;
    check_labels(samples, k)?;
    let outcomes: Vec<Result<(f64, usize)>> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let logits = model.logits(&mut g, store, s)?;
            let pred = argmax(g.value(logits).data());
            let loss = g.cross_entropy(logits, &[s.label])?;
            Ok((g.value(loss).data()[0] as f64, pred))
        })
        .collect();
    let mut confusion = Confusion::new(k);
    let mut loss = 0.0;
    for (s, o) in samples.iter().zip(outcomes) {
        let (l, pred) = o?;
        loss += l;
        confusion.add(s.label, pred);
    }
    Ok((loss / samples.len().max(1) as f64, compute_metrics(&confusion)))
}

/// Trains the pixel-set classifier with temporal dropout and the cosine
/// softmax loss. Deterministic given `cfg.seed`.
pub fn run_pretrain(train: &Dataset, val: Option<&Dataset>, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    let samples = train.pixel_sets()?;
    if train.meta.channels != model_cfg.channels || train.meta.n_classes() != model_cfg.n_classes {
        return Err(Error::Config(format!(
            "model expects {} channels and {} classes, dataset has {} and {}",
            model_cfg.channels,
            model_cfg.n_classes,
            train.meta.channels,
            train.meta.n_classes()
        )));
    }
    check_labels(samples, model_cfg.n_classes)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let model = PixelSetClassifier::init(model_cfg, &mut store, &mut rng)?;
    let (lo, hi) = cfg.dropout_range;

    let step = |store: &ParamStore<f32>, i: usize, seed: u64| {
        let s = temporal_dropout(&samples[i], lo, hi, seed)?;
        let mut g = Graph::new();
        let logits = model.logits(&mut g, store, &s)?;
        let loss = g.cross_entropy(logits, &[s.label])?;
        g.backward(loss)?;
        Ok((g.value(loss).data()[0] as f64, g.param_grads(store)))
    };
    let eval = |store: &ParamStore<f32>| {
        val.map(|v| evaluate_pixel_sets(&model, store, v).map(|(loss, metrics)| Evaluation { loss, metrics }))
            .transpose()
    };
    let snapshot = |store: &ParamStore<f32>| Checkpoint::new(model_cfg, model_cfg.exchanger.stages, store.clone());

    let (initial_loss, _) = evaluate_pixel_sets(&model, &store, train)?;
    let metrics = fit(cfg, &mut store, samples.len(), initial_loss, &step, &eval, &snapshot)?;
    let checkpoint = snapshot(&store)?;
    Ok(PretrainOutput {
        model,
        params: store,
        checkpoint,
        metrics,
    })
}
