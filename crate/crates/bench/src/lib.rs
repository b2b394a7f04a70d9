//! Fixtures shared by the benchmarks.

use exchanger::baseline::SelfAttentionParams;
use exchanger::encoding::{sinusoidal_pe, DEFAULT_MAX_PERIOD};
use exchanger::{ExchangerConfig, ExchangerParams, ParamStore, Tensor, TimeAxis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub store: ParamStore<f32>,
    pub exchanger: ExchangerParams,
    pub attention: SelfAttentionParams,
    pub v: Tensor<f32>,
    pub p: Tensor<f32>,
    pub mask: Vec<bool>,
}

/// Both encoders initialized from one seed, plus a `[T, d]` input with
/// sorted acquisition days and roughly a tenth of the steps masked.
pub fn fixture(cfg: &ExchangerConfig, t: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let exchanger = ExchangerParams::init(cfg, &mut store, "exchanger", &mut rng).expect("valid config");
    let attention = SelfAttentionParams::init(cfg, &mut store, "attention", &mut rng).expect("valid config");
    let v = Tensor::new(&[t, cfg.d], (0..t * cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut days: Vec<f32> = (0..t).map(|_| rng.random_range(1.0..365.0)).collect();
    days.sort_by(f32::total_cmp);
    let mut mask: Vec<bool> = (0..t).map(|_| rng.random_bool(0.9)).collect();
    mask[0] = true;
    let time = TimeAxis::new(days, mask.clone()).unwrap();
    let p = sinusoidal_pe(&time, cfg.d, DEFAULT_MAX_PERIOD).unwrap();
    Fixture { store, exchanger, attention, v, p, mask }
}
