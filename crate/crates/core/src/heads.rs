//! Pooling, the cosine classifier used for pretraining and the per-pixel
//! dense head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-8;
const LAYER_NORM_EPS: f64 = 1e-5;

fn masked_mean<T: Scalar>(g: &mut Graph<T>, x: Var, mask: &[bool], what: &str) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Data(format!("every {what} is masked")));
    }
    let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    g.weighted_mean_rows(x, &w)
}

/// Masked mean over time: `[.., T, d] -> [.., d]`.
pub fn temporal_pool<T: Scalar>(g: &mut Graph<T>, encoded: Var, mask: &[bool]) -> Result<Var> {
    masked_mean(g, encoded, mask, "time step")
}

/// Masked mean over pixel instances: `[N_pix, d] -> [d]`.
pub fn mil_pool<T: Scalar>(g: &mut Graph<T>, features: Var, pixel_mask: &[bool]) -> Result<Var> {
    masked_mean(g, features, pixel_mask, "pixel")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub proj: usize,
    pub init_scale: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            proj: 128,
            init_scale: 10.0,
        }
    }
}

/// Projector MLP and cosine prototypes.
#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub fc1: (ParamId, ParamId),
    pub norm: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
    pub prototypes: ParamId,
    pub scale: ParamId,
}

impl ClassifierParams {
    pub fn init<T: Scalar, R: Rng>(
        d: usize,
        n_classes: usize,
        cfg: &ClassifierConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Self {
        let name = |s: &str| format!("{prefix}.{s}");
        Self {
            fc1: (store.fan_in(name("fc1.w"), &[d, cfg.hidden], rng), store.zeros(name("fc1.b"), &[cfg.hidden])),
            norm: (store.ones(name("norm.gamma"), &[cfg.hidden]), store.zeros(name("norm.beta"), &[cfg.hidden])),
            fc2: (store.fan_in(name("fc2.w"), &[cfg.hidden, cfg.proj], rng), store.zeros(name("fc2.b"), &[cfg.proj])),
            prototypes: store.normal(name("prototypes"), &[n_classes, cfg.proj], 1.0, rng),
            scale: store.add(name("scale"), Tensor::scalar(T::of(cfg.init_scale))),
        }
    }
}

fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let (w, b) = (g.param(store, w), g.param(store, b));
    let y = g.matmul(x, w)?;
    g.add_bcast(y, b)
}

/// `d -> hidden -> proj` with layer norm and GELU between the layers.
pub fn project<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, params: &ClassifierParams, x: Var) -> Result<Var> {
    let h = linear(g, store, x, params.fc1)?;
    let (gamma, beta) = (g.param(store, params.norm.0), g.param(store, params.norm.1));
    let h = g.layer_norm(h, gamma, beta, LAYER_NORM_EPS)?;
    let h = g.gelu(h);
    linear(g, store, h, params.fc2)
}

/// `s * <f / |f|, w_k / |w_k|>` for projected features `[.., proj]`.
pub fn cosine_logits<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, params: &ClassifierParams, feature: Var) -> Result<Var> {
    let f = g.l2_normalize(feature, NORM_EPS);
    let w = g.param(store, params.prototypes);
    let w = g.l2_normalize(w, NORM_EPS);
    let wt = g.transpose(w)?;
    let cos = g.matmul(f, wt)?;
    let s = g.param(store, params.scale);
    g.mul_scalar(cos, s)
}

/// Cross-entropy of the cosine logits; `feature` is `[proj]` or `[B, proj]`.
pub fn cosine_softmax_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &ClassifierParams,
    feature: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = cosine_logits(g, store, params, feature)?;
    g.cross_entropy(logits, labels)
}

/// `-(1 - p_y)^gamma log p_y`, averaged over non-ignored rows.
pub fn focal_ce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("focal gamma must be finite and non-negative, got {gamma}")));
    }
    g.focal_loss(logits, labels, gamma)
}

#[derive(Clone, Debug)]
pub struct DenseHeadParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl DenseHeadParams {
    pub fn init<T: Scalar, R: Rng>(d: usize, n_classes: usize, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Self {
        Self {
            w: store.fan_in(format!("{prefix}.w"), &[d, n_classes], rng),
            b: store.zeros(format!("{prefix}.b"), &[n_classes]),
        }
    }
}

/// Independent linear map per pixel: `[.., d] -> [.., K]`.
pub fn dense_head<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, params: &DenseHeadParams, features: Var) -> Result<Var> {
    linear(g, store, features, (params.w, params.b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn classifier(store: &mut ParamStore<f64>, k: usize, proj: usize) -> ClassifierParams {
        let cfg = ClassifierConfig { hidden: 4, proj, init_scale: 1.0 };
        ClassifierParams::init(3, k, &cfg, store, "head", &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn pools_are_masked_means() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[9.0, 9.0]]).unwrap());
        let m = mil_pool(&mut g, x, &[true, true, false]).unwrap();
        assert_eq!(g.value(m).data(), &[0.5, 0.5]);
        assert!(matches!(temporal_pool(&mut g, x, &[false; 3]), Err(Error::Data(_))));
    }

    #[test]
    fn prototype_aligned_feature_closed_form() {
        let mut store = ParamStore::<f64>::new();
        let p = classifier(&mut store, 2, 2);
        *store.get_mut(p.prototypes) = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let loss = cosine_softmax_loss(&mut g, &store, &p, f, &[0]).unwrap();
        let want = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((g.value(loss).data()[0] - want).abs() < 1e-7);
        assert!((want - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn identical_prototypes_give_log_k() {
        let mut store = ParamStore::<f64>::new();
        let p = classifier(&mut store, 3, 2);
        *store.get_mut(p.prototypes) = Tensor::from_rows(&[&[0.3, 0.4][..]; 3]).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[2], vec![-2.0, 7.0]).unwrap());
        let loss = cosine_softmax_loss(&mut g, &store, &p, f, &[1]).unwrap();
        assert!((g.value(loss).data()[0] - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_dense_head_is_uniform() {
        let mut store = ParamStore::<f64>::new();
        let p = DenseHeadParams::init(3, 4, &mut store, "dense", &mut ChaCha8Rng::seed_from_u64(0));
        *store.get_mut(p.w) = Tensor::zeros(&[3, 4]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 2, 3], vec![1.5; 12]).unwrap());
        let logits = dense_head(&mut g, &store, &p, x).unwrap();
        assert_eq!(g.shape(logits), &[2, 2, 4]);
        let probs = g.softmax(logits);
        assert!(g.value(probs).data().iter().all(|&q| (q - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identical_pixels_pool_to_themselves() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[&[0.3, -2.0][..]; 4]).unwrap());
        let m = mil_pool(&mut g, x, &[true; 4]).unwrap();
        assert_eq!(g.value(m).data(), &[0.3, -2.0]);
    }

    #[test]
    fn confident_correct_focal_loss_vanishes() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_rows(&[&[40.0, -40.0]]).unwrap());
        let loss = focal_ce_loss(&mut g, z, &[0], 2.0).unwrap();
        assert!(g.value(loss).data()[0] < 1e-30);
    }

    #[test]
    fn single_pixel_grid_is_plain_classification() {
        let mut store = ParamStore::<f64>::new();
        let p = DenseHeadParams::init(3, 2, &mut store, "dense", &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let grid = g.constant(Tensor::new(&[1, 1, 3], vec![0.2, -0.4, 1.0]).unwrap());
        let flat = g.constant(Tensor::new(&[1, 3], vec![0.2, -0.4, 1.0]).unwrap());
        let a = dense_head(&mut g, &store, &p, grid).unwrap();
        let b = dense_head(&mut g, &store, &p, flat).unwrap();
        assert_eq!(g.shape(a), &[1, 1, 2]);
        assert_eq!(g.value(a).data(), g.value(b).data());
    }
}
