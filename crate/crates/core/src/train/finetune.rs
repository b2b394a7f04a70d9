use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{compute_metrics, ClassMetrics, Confusion, RunMetrics};
use super::model::{DenseModel, ModelConfig, BACKBONE_PREFIX};
use super::trainer::{fit, Evaluation};
use super::{derive_seed, TrainConfig};
use crate::checkpoint::{params_hash, Checkpoint};
use crate::data::{Dataset, GridSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, IGNORE_INDEX};
use crate::params::ParamStore;

/// Backbone initialization for finetuning.
#[derive(Clone, Debug)]
pub enum FinetuneInit {
    Scratch,
    /// Parameters whose names start with the backbone prefix are copied
    /// from this store; everything else keeps its fresh initialization.
    Pretrained(ParamStore<f32>),
}

pub struct FinetuneOutput {
    pub model: DenseModel,
    pub params: ParamStore<f32>,
    pub checkpoint: Checkpoint,
    pub metrics: RunMetrics,
    /// Hash of the backbone parameters at initialization.
    pub init_backbone_hash: String,
    /// Hash of every non-backbone parameter at initialization.
    pub init_head_hash: String,
}

fn labelled_pixels(grid: &GridSample) -> Vec<usize> {
    (0..grid.semantic_labels.len()).filter(|&p| grid.semantic_labels[p] != IGNORE_INDEX).collect()
}

/// Mean focal loss per grid and pixel-level metrics on a grid dataset.
pub fn evaluate_grids(model: &DenseModel, store: &ParamStore<f32>, ds: &Dataset, gamma: f64) -> Result<(f64, ClassMetrics)> {
    let grids = ds.grids()?;
    let k = model.config.n_classes;
    let outcomes: Vec<Result<(f64, Confusion)>> = grids
        .par_iter()
        .map(|grid| {
            let pixels = labelled_pixels(grid);
            let mut confusion = Confusion::new(k);
            if pixels.is_empty() {
                return Ok((0.0, confusion));
            }
            let labels: Vec<usize> = pixels.iter().map(|&p| grid.semantic_labels[p]).collect();
            let mut g = Graph::new();
            let logits = model.logits(&mut g, store, grid, &pixels)?;
            for (row, &y) in g.value(logits).data().chunks(k).zip(&labels) {
                let pred = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
                    .0;
                confusion.add(y, pred);
            }
            let loss = g.focal_loss(logits, &labels, gamma)?;
            Ok((g.value(loss).data()[0] as f64, confusion))
        })
        .collect();
    let mut confusion = Confusion::new(k);
    let mut loss = 0.0;
    for o in outcomes {
        let (l, c) = o?;
        loss += l;
        confusion.merge(&c);
    }
    Ok((loss / grids.len().max(1) as f64, compute_metrics(&confusion)))
}

/// Trains the per-pixel model with the focal loss. `target_miou`, when
/// given, is recorded along with the first epoch reaching it.
pub fn run_finetune(
    train: &Dataset,
    val: Option<&Dataset>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    init: &FinetuneInit,
    target_miou: Option<f64>,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    let grids = train.grids()?;
    if train.meta.channels != model_cfg.channels || train.meta.n_classes() != model_cfg.n_classes {
        return Err(Error::Config(format!(
            "model expects {} channels and {} classes, dataset has {} and {}",
            model_cfg.channels,
            model_cfg.n_classes,
            train.meta.channels,
            train.meta.n_classes()
        )));
    }
    if let Some(g) = grids.iter().find(|g| g.semantic_labels.iter().any(|&l| l != IGNORE_INDEX && l >= model_cfg.n_classes)) {
        return Err(Error::Data(format!("grid label map holds a class >= {} (first max {:?})", model_cfg.n_classes, g.semantic_labels.iter().max())));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let model = DenseModel::init(model_cfg, &mut store, &mut rng)?;
    if let FinetuneInit::Pretrained(pre) = init {
        let copied = store.copy_prefix_from(pre, BACKBONE_PREFIX)?;
        let expected = store.iter().filter(|(_, n, _)| n.starts_with(BACKBONE_PREFIX)).count();
        if copied != expected {
            return Err(Error::Config(format!("pretrained store holds {copied} of {expected} backbone parameters")));
        }
    }
    let init_backbone_hash = params_hash(&store, |n| n.starts_with(BACKBONE_PREFIX));
    let init_head_hash = params_hash(&store, |n| !n.starts_with(BACKBONE_PREFIX));
    let gamma = cfg.focal_gamma;
    let per_grid = cfg.pixels_per_grid;

    let step = |store: &ParamStore<f32>, i: usize, seed: u64| {
        let grid = &grids[i];
        let mut pixels = labelled_pixels(grid);
        if per_grid > 0 && pixels.len() > per_grid {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pick: Vec<usize> = index::sample(&mut rng, pixels.len(), per_grid).into_vec();
            pick.sort_unstable();
            pixels = pick.into_iter().map(|j| pixels[j]).collect();
        }
        if pixels.is_empty() {
            return Ok((0.0, crate::graph::Gradients::zeros_like(store)));
        }
        let labels: Vec<usize> = pixels.iter().map(|&p| grid.semantic_labels[p]).collect();
        let mut g = Graph::new();
        let logits = model.logits(&mut g, store, grid, &pixels)?;
        let loss = g.focal_loss(logits, &labels, gamma)?;
        g.backward(loss)?;
        Ok((g.value(loss).data()[0] as f64, g.param_grads(store)))
    };
    let eval = |store: &ParamStore<f32>| {
        val.map(|v| evaluate_grids(&model, store, v, gamma).map(|(loss, metrics)| Evaluation { loss, metrics }))
            .transpose()
    };
    let snapshot = |store: &ParamStore<f32>| Checkpoint::new(model_cfg, model_cfg.exchanger.stages, store.clone());

    let (initial_loss, _) = evaluate_grids(&model, &store, train, gamma)?;
    let mut metrics = fit(cfg, &mut store, grids.len(), initial_loss, &step, &eval, &snapshot)?;
    if let Some(t) = target_miou {
        metrics.target_miou = Some(t);
        metrics.epochs_to_target = metrics.epochs_to_reach(t);
    }
    let checkpoint = snapshot(&store)?;
    Ok(FinetuneOutput {
        model,
        params: store,
        checkpoint,
        metrics,
        init_backbone_hash,
        init_head_hash,
    })
}
