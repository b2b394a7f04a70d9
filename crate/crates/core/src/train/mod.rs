//! Optimization: AdamW, learning-rate schedules, metrics and the
//! pretraining and finetuning loops.

mod finetune;
mod metrics;
mod model;
mod optim;
mod pretrain;
mod schedule;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use finetune::{evaluate_grids, run_finetune, FinetuneInit, FinetuneOutput};
pub use metrics::{compute_metrics, ClassMetrics, Confusion, EpochRecord, RunMetrics};
pub use model::{Backbone, DenseModel, ModelConfig, PixelSetClassifier, BACKBONE_PREFIX};
pub use optim::{adamw_step, AdamState};
pub use pretrain::{evaluate_pixel_sets, run_pretrain, PretrainOutput};
pub use schedule::lr_at;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Step,
    Poly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    FinetuneScratch,
    FinetunePretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub schedule: ScheduleKind,
    pub step_fractions: Vec<f64>,
    pub step_factor: f64,
    pub poly_power: f64,
    /// Temporal dropout rate range; `(0, 0)` disables the augmentation.
    pub dropout_range: (f64, f64),
    pub focal_gamma: f64,
    /// Pixels drawn per grid sample in each finetuning step; `0` uses all.
    pub pixels_per_grid: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr0: 2e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            schedule: ScheduleKind::Step,
            step_fractions: vec![0.7, 0.9],
            step_factor: 10.0,
            poly_power: 0.9,
            dropout_range: (0.2, 0.4),
            focal_gamma: 2.0,
            pixels_per_grid: 0,
            seed: 0,
            mode: Mode::Pretrain,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return err(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return err("weight_decay must be non-negative and eps positive".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return err(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        let f = &self.step_fractions;
        if f.iter().any(|&x| !(x > 0.0 && x < 1.0)) || f.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("step fractions {f:?} must be strictly increasing in (0, 1)"));
        }
        if !(self.step_factor >= 1.0 && self.poly_power > 0.0) {
            return err("step_factor must be >= 1 and poly_power positive".into());
        }
        let (lo, hi) = self.dropout_range;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return err(format!("dropout range ({lo}, {hi}) must satisfy 0 <= low <= high < 1"));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return err(format!("focal_gamma must be non-negative, got {}", self.focal_gamma));
        }
        Ok(())
    }
}

/// Derives an independent stream seed from a base seed and a path of
/// indices (splitmix64 finalizer).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    path.iter()
        .fold(mix(base), |acc, &x| mix(acc ^ x.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}
