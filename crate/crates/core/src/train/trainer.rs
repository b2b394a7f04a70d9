use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{ClassMetrics, EpochRecord, RunMetrics};
use super::optim::{adamw_step, AdamState};
use super::schedule::lr_at;
use super::{derive_seed, TrainConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;

/// Loss and parameter gradients of one training sample.
pub(crate) type SampleStep = (f64, Gradients<f32>);

pub(crate) struct Evaluation {
    pub loss: f64,
    pub metrics: ClassMetrics,
}

fn diverged(message: String, store: &ParamStore<f32>, snapshot: &dyn Fn(&ParamStore<f32>) -> Result<Checkpoint>) -> Error {
    let last_good = if store.is_finite() { snapshot(store).ok().map(Box::new) } else { None };
    Error::Diverged { message, last_good }
}

/// Minibatch AdamW over `n_train` samples.
///
/// `step(store, index, seed)` returns one sample's loss and gradients; the
/// batch gradient is their mean, summed in batch order so the result does
/// not depend on the thread count. `eval` runs after every epoch.
pub(crate) fn fit(
    cfg: &TrainConfig,
    store: &mut ParamStore<f32>,
    n_train: usize,
    initial_loss: f64,
    step: &(dyn Fn(&ParamStore<f32>, usize, u64) -> Result<SampleStep> + Sync),
    eval: &dyn Fn(&ParamStore<f32>) -> Result<Option<Evaluation>>,
    snapshot: &dyn Fn(&ParamStore<f32>) -> Result<Checkpoint>,
) -> Result<RunMetrics> {
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    let batches_per_epoch = n_train.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut state = AdamState::new(store);
    let mut metrics = RunMetrics {
        initial_train_loss: initial_loss,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let global = epoch * batches_per_epoch + b;
            lr = lr_at(global, total_steps, cfg);
            let frozen: &ParamStore<f32> = store;
            let results: Vec<Result<SampleStep>> = batch
                .par_iter()
                .map(|&i| step(frozen, i, derive_seed(cfg.seed, &[2, epoch as u64, i as u64])))
                .collect();
            let mut grads = Gradients::zeros_like(store);
            for r in results {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(diverged(format!("loss {loss} at epoch {epoch}, step {global}"), store, snapshot));
                }
                loss_sum += loss;
                grads.accumulate(&g);
            }
            grads.scale(1.0 / batch.len() as f32);
            match adamw_step(store, &grads, &mut state, lr, cfg.betas, cfg.eps, cfg.weight_decay) {
                Ok(()) => {}
                Err(Error::Numerical(m)) => {
                    return Err(diverged(format!("{m} at epoch {epoch}, step {global}"), store, snapshot));
                }
                Err(e) => return Err(e),
            }
            if !store.is_finite() {
                return Err(Error::Diverged {
                    message: format!("parameters became non-finite at epoch {epoch}, step {global}"),
                    last_good: None,
                });
            }
        }
        let evaluation = eval(store)?;
        metrics.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n_train as f64,
            val_loss: evaluation.as_ref().map(|e| e.loss),
            val: evaluation.map(|e| e.metrics),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(metrics)
}
