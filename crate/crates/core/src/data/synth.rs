use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, GridSample, PixelSetSample, Samples};
use crate::encoding::TimeAxis;
use crate::error::{Error, Result};
use crate::graph::IGNORE_INDEX;
use crate::tensor::Tensor;

const GRID_SEED_DOMAIN: u64 = 0x6772_6964_5f73_6565;

/// Double-logistic phenology parameters of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub name: String,
    pub amplitude: f64,
    pub start_of_season: f64,
    pub end_of_season: f64,
    pub growth_rate: f64,
    pub senescence_rate: f64,
    pub base: f64,
}

impl ClassPrior {
    fn new(name: &str, amplitude: f64, sos: f64, eos: f64) -> Self {
        Self {
            name: name.into(),
            amplitude,
            start_of_season: sos,
            end_of_season: eos,
            growth_rate: 0.08,
            senescence_rate: 0.08,
            base: 0.1,
        }
    }
}

/// `a * (sigmoid(b (t - s)) - sigmoid(c (t - e))) + base`.
pub fn double_logistic(t: f64, a: f64, b: f64, s: f64, c: f64, e: f64, base: f64) -> f64 {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    a * (sig(b * (t - s)) - sig(c * (t - e))) + base
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: Vec<ClassPrior>,
    pub t_min: usize,
    pub t_max: usize,
    /// Acquisition days are drawn from `1..=season_days`.
    pub season_days: usize,
    pub channels: usize,
    pub channel_gains: Vec<f64>,
    pub channel_offsets: Vec<f64>,
    pub n_pix: usize,
    pub noise: f64,
    pub pixel_offset_std: f64,
    pub sos_jitter: f64,
    pub amplitude_jitter: f64,
    pub cloud_prob: f64,
    pub grid_size: usize,
    pub n_grids: usize,
    pub min_parcels: usize,
    pub max_parcels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: vec![
                ClassPrior::new("background", 0.15, 120.0, 250.0),
                ClassPrior::new("early", 0.7, 90.0, 190.0),
                ClassPrior::new("late", 0.7, 160.0, 260.0),
                ClassPrior::new("long", 0.7, 90.0, 260.0),
                ClassPrior::new("tall", 1.1, 120.0, 220.0),
            ],
            t_min: 20,
            t_max: 40,
            season_days: 365,
            channels: 4,
            channel_gains: vec![1.0, 0.8, 0.6, 0.4],
            channel_offsets: vec![0.0, 0.05, 0.1, 0.15],
            n_pix: 8,
            noise: 0.03,
            pixel_offset_std: 0.02,
            sos_jitter: 10.0,
            amplitude_jitter: 0.08,
            cloud_prob: 0.1,
            grid_size: 8,
            n_grids: 0,
            min_parcels: 2,
            max_parcels: 6,
        }
    }
}

impl SynthConfig {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.classes.len() < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes.len()));
        }
        if !(10 <= self.t_min && self.t_min <= self.t_max && self.t_max <= 64) {
            return err(format!("sequence length range [{}, {}] must lie within [10, 64]", self.t_min, self.t_max));
        }
        if self.season_days < self.t_max {
            return err(format!("season of {} days cannot hold {} acquisitions", self.season_days, self.t_max));
        }
        if self.channels == 0 || self.channel_gains.len() != self.channels || self.channel_offsets.len() != self.channels {
            return err(format!(
                "{} channels need as many gains ({}) and offsets ({})",
                self.channels,
                self.channel_gains.len(),
                self.channel_offsets.len()
            ));
        }
        if self.n_pix == 0 || self.grid_size == 0 {
            return err("n_pix and grid_size must be positive".into());
        }
        if self.min_parcels == 0 || self.min_parcels > self.max_parcels {
            return err(format!("parcel count range [{}, {}] is empty", self.min_parcels, self.max_parcels));
        }
        let scalars = [self.noise, self.pixel_offset_std, self.sos_jitter, self.amplitude_jitter, self.cloud_prob];
        if scalars.iter().any(|x| !x.is_finite() || *x < 0.0) || self.cloud_prob >= 1.0 {
            return err("noise, jitter and cloud probability must be finite, non-negative, cloud < 1".into());
        }
        for c in &self.classes {
            let ps = [c.amplitude, c.start_of_season, c.end_of_season, c.growth_rate, c.senescence_rate, c.base];
            if ps.iter().any(|x| !x.is_finite()) {
                return err(format!("class {} has non-finite curve parameters", c.name));
            }
            // extremes of the jittered curve over the season
            for a in [c.amplitude - self.amplitude_jitter, c.amplitude + self.amplitude_jitter] {
                for day in 0..=self.season_days {
                    let v = double_logistic(
                        day as f64,
                        a,
                        c.growth_rate,
                        c.start_of_season,
                        c.senescence_rate,
                        c.end_of_season,
                        c.base,
                    );
                    if !(v.is_finite() && (0.0..=1.5).contains(&v)) {
                        return err(format!("class {} curve leaves [0, 1.5] (value {v} on day {day})", c.name));
                    }
                }
            }
        }
        Ok(())
    }

    fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            channels: self.channels,
            class_names: self.classes.iter().map(|c| c.name.clone()).collect(),
        }
    }
}

/// Pixel-set samples and the grid samples generated alongside them.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub pixel_sets: Dataset,
    pub grids: Dataset,
}

/// Per-sample realisation of a class prior.
struct Curve {
    a: f64,
    b: f64,
    s: f64,
    c: f64,
    e: f64,
    base: f64,
}

impl Curve {
    fn draw(prior: &ClassPrior, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut jitter = |w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        let a = prior.amplitude + jitter(cfg.amplitude_jitter);
        let s = prior.start_of_season + jitter(cfg.sos_jitter);
        let e = prior.end_of_season + jitter(cfg.sos_jitter);
        Self {
            a,
            b: prior.growth_rate,
            s,
            c: prior.senescence_rate,
            e,
            base: prior.base,
        }
    }

    fn at(&self, t: f64) -> f64 {
        double_logistic(t, self.a, self.b, self.s, self.c, self.e, self.base)
    }
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    std * z
}

fn draw_time(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> TimeAxis {
    let t = rng.random_range(cfg.t_min..=cfg.t_max);
    let mut days: Vec<usize> = index::sample(rng, cfg.season_days, t).into_iter().map(|d| d + 1).collect();
    days.sort_unstable();
    let mut valid: Vec<bool> = (0..t).map(|_| !rng.random_bool(cfg.cloud_prob)).collect();
    if !valid.iter().any(|&v| v) {
        let keep = rng.random_range(0..t);
        valid[keep] = true;
    }
    TimeAxis {
        timestamps: days.into_iter().map(|d| d as f32).collect(),
        valid,
    }
}

/// Reflectance of one pixel across channels at one time step.
fn pixel_value(curve: &Curve, cfg: &SynthConfig, day: f64, channel: usize, offset: f64, clouded: bool, rng: &mut ChaCha8Rng) -> f32 {
    let clean = if clouded {
        0.9
    } else {
        curve.at(day) * cfg.channel_gains[channel] + cfg.channel_offsets[channel] + offset
    };
    (clean + gauss(rng, cfg.noise)) as f32
}

fn pixel_set(cfg: &SynthConfig, idx: usize, seed: u64) -> PixelSetSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ idx as u64);
    let label = idx % cfg.n_classes();
    let time = draw_time(cfg, &mut rng);
    let curve = Curve::draw(&cfg.classes[label], cfg, &mut rng);
    let (t, c, n) = (time.len(), cfg.channels, cfg.n_pix);
    let offsets: Vec<f64> = (0..n).map(|_| gauss(&mut rng, cfg.pixel_offset_std)).collect();
    let mut data = Vec::with_capacity(t * c * n);
    for ti in 0..t {
        let day = time.timestamps[ti] as f64;
        for ci in 0..c {
            for &off in &offsets {
                data.push(pixel_value(&curve, cfg, day, ci, off, !time.valid[ti], &mut rng));
            }
        }
    }
    PixelSetSample {
        values: Tensor::from_parts(vec![t, c, n], data),
        time,
        label,
        parcel_id: idx as u32,
    }
}

fn grid(cfg: &SynthConfig, idx: usize, seed: u64) -> GridSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ GRID_SEED_DOMAIN ^ idx as u64);
    let side = cfg.grid_size;
    let k = cfg.n_classes();
    let time = draw_time(cfg, &mut rng);
    let mut labels = vec![0usize; side * side];
    let mut parcel_ids = vec![0u32; side * side];
    let n_parcels = rng.random_range(cfg.min_parcels..=cfg.max_parcels);
    let mut curves = vec![Curve::draw(&cfg.classes[0], cfg, &mut rng)];
    for p in 1..=n_parcels {
        let class = rng.random_range(1..k);
        curves.push(Curve::draw(&cfg.classes[class], cfg, &mut rng));
        let h = rng.random_range(1..=side.div_ceil(2));
        let w = rng.random_range(1..=side.div_ceil(2));
        let r0 = rng.random_range(0..=side - h);
        let c0 = rng.random_range(0..=side - w);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                labels[r * side + c] = class;
                parcel_ids[r * side + c] = p as u32;
            }
        }
    }
    let offsets: Vec<f64> = (0..side * side).map(|_| gauss(&mut rng, cfg.pixel_offset_std)).collect();
    let (t, ch) = (time.len(), cfg.channels);
    let mut data = Vec::with_capacity(t * ch * side * side);
    for ti in 0..t {
        let day = time.timestamps[ti] as f64;
        for ci in 0..ch {
            for px in 0..side * side {
                let curve = &curves[parcel_ids[px] as usize];
                data.push(pixel_value(curve, cfg, day, ci, offsets[px], !time.valid[ti], &mut rng));
            }
        }
    }
    debug_assert!(labels.iter().all(|&l| l < k || l == IGNORE_INDEX));
    GridSample {
        values: Tensor::from_parts(vec![t, ch, side, side], data),
        time,
        semantic_labels: labels,
        parcel_ids,
    }
}

/// Generates `n_samples` pixel-set samples and `cfg.n_grids` grid samples.
///
/// Sample `i` is drawn from its own generator seeded with `seed ^ i`, so
/// the output does not depend on thread scheduling. Labels cycle through
/// the classes, which keeps the classes balanced.
pub fn generate_synthetic(cfg: &SynthConfig, n_samples: usize, seed: u64) -> Result<SyntheticSet> {
    cfg.validate()?;
    let pixel_sets: Vec<PixelSetSample> = (0..n_samples).into_par_iter().map(|i| pixel_set(cfg, i, seed)).collect();
    let grids: Vec<GridSample> = (0..cfg.n_grids).into_par_iter().map(|i| grid(cfg, i, seed)).collect();
    if pixel_sets.iter().any(|s| !s.values.is_finite()) || grids.iter().any(|g| !g.values.is_finite()) {
        return Err(Error::Config("class priors produced non-finite values".into()));
    }
    Ok(SyntheticSet {
        pixel_sets: Dataset {
            meta: cfg.meta(),
            samples: Samples::PixelSet(pixel_sets),
        },
        grids: Dataset {
            meta: cfg.meta(),
            samples: Samples::Grid(grids),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SynthConfig {
        SynthConfig {
            noise: 0.0,
            pixel_offset_std: 0.0,
            cloud_prob: 0.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noise_free_pixels_are_identical() {
        let set = generate_synthetic(&quiet(), 3, 1).unwrap();
        for s in set.pixel_sets.pixel_sets().unwrap() {
            let series = s.pixel_series();
            let per = s.len() * s.channels();
            let first = &series.data()[..per];
            for p in 1..s.n_pix() {
                assert_eq!(&series.data()[p * per..(p + 1) * per], first);
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig { n_grids: 3, ..SynthConfig::default() };
        assert_eq!(generate_synthetic(&cfg, 10, 9).unwrap(), generate_synthetic(&cfg, 10, 9).unwrap());
        assert_ne!(generate_synthetic(&cfg, 10, 9).unwrap(), generate_synthetic(&cfg, 10, 10).unwrap());
    }

    #[test]
    fn non_finite_prior_is_a_config_error() {
        let mut cfg = SynthConfig::default();
        cfg.classes[1].growth_rate = f64::NAN;
        assert!(matches!(generate_synthetic(&cfg, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn timestamps_are_distinct_days_in_season() {
        let set = generate_synthetic(&SynthConfig::default(), 20, 3).unwrap();
        for s in set.pixel_sets.pixel_sets().unwrap() {
            assert!((20..=40).contains(&s.len()));
            assert!(s.time.timestamps.windows(2).all(|w| w[0] < w[1]));
            assert!(s.time.timestamps.iter().all(|&d| (1.0..=365.0).contains(&d)));
            assert!(s.time.n_valid() >= 1);
        }
    }

    #[test]
    fn grids_hold_parcels_on_background() {
        let cfg = SynthConfig { n_grids: 10, ..SynthConfig::default() };
        let set = generate_synthetic(&cfg, 0, 5).unwrap();
        for g in set.grids.grids().unwrap() {
            let n_parcels = *g.parcel_ids.iter().max().unwrap();
            assert!((1..=6).contains(&n_parcels));
            for (l, p) in g.semantic_labels.iter().zip(&g.parcel_ids) {
                assert_eq!(*p == 0, *l == 0);
            }
        }
    }
}
