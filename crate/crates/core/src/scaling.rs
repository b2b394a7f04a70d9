//! Wall-clock and analytic cost scaling of the temporal encoders.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_flops, self_attention_baseline, SelfAttentionParams};
use crate::encoding::{sinusoidal_pe, TimeAxis, DEFAULT_MAX_PERIOD};
use crate::error::{Error, Result};
use crate::exchanger::{count_flops, exchanger_forward, ExchangerConfig, ExchangerParams};
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    Exchanger,
    SelfAttention,
}

impl Encoder {
    pub fn name(self) -> &'static str {
        match self {
            Encoder::Exchanger => "exchanger",
            Encoder::SelfAttention => "self_attention",
        }
    }

    pub fn flops(self, cfg: &ExchangerConfig, t: usize) -> u64 {
        match self {
            Encoder::Exchanger => count_flops(cfg, t as u64),
            Encoder::SelfAttention => baseline_flops(cfg, t as u64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub encoder: Encoder,
    pub t: usize,
    pub n_clusters: usize,
    pub d: usize,
    pub heads: usize,
    pub flops: u64,
    /// Seconds per forward pass.
    pub median_seconds: f64,
    pub min_seconds: f64,
    pub repeats: usize,
    /// Forward passes per timed repeat.
    pub inner_loops: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub encoder: Encoder,
    /// Least-squares slope of log(median time) against log(T).
    pub measured: f64,
    /// Same fit on the analytic FLOP counts.
    pub analytic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub records: Vec<BenchRecord>,
    pub slopes: Vec<SlopeFit>,
}

impl ScalingReport {
    pub fn slope(&self, encoder: Encoder) -> Option<&SlopeFit> {
        self.slopes.iter().find(|s| s.encoder == encoder)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "encoder,t,n_clusters,d,heads,flops,median_seconds,min_seconds,repeats,inner_loops")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{:e},{:e},{},{}",
                r.encoder.name(),
                r.t,
                r.n_clusters,
                r.d,
                r.heads,
                r.flops,
                r.median_seconds,
                r.min_seconds,
                r.repeats,
                r.inner_loops
            )?;
        }
        Ok(())
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Data("log-log fit needs at least two positive, finite points".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Data("log-log fit needs at least two distinct sequence lengths".into()));
    }
    Ok(sxy / sxx)
}

/// Timing options for [`run_scaling`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingConfig {
    pub repeats: usize,
    pub warmup: usize,
    /// Each timed repeat runs enough forward passes to last this long.
    pub min_sample_seconds: f64,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            warmup: 1,
            min_sample_seconds: 0.02,
            seed: 0,
        }
    }
}

struct Instance {
    store: ParamStore<f32>,
    exchanger: ExchangerParams,
    attention: SelfAttentionParams,
}

fn forward(encoder: Encoder, inst: &Instance, v: &Tensor<f32>, p: &Tensor<f32>, mask: &[bool]) -> Result<f32> {
    let mut g = Graph::new();
    let (vv, pv) = (g.constant(v.clone()), g.constant(p.clone()));
    let out = match encoder {
        Encoder::Exchanger => exchanger_forward(&mut g, &inst.store, &inst.exchanger, vv, pv, mask)?,
        Encoder::SelfAttention => self_attention_baseline(&mut g, &inst.store, &inst.attention, vv, pv, mask)?,
    };
    Ok(g.value(out).data()[0])
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times one forward pass of each encoder at every sequence length.
///
/// Runs are serialized on the calling thread. Per length and encoder:
/// `warmup` untimed passes, then `inner_loops` grows until a sample of that
/// many passes lasts at least `min_sample_seconds`. The `repeats` timed
/// samples are then taken in rounds that visit every length and encoder
/// once each.
pub fn run_scaling(encoders: &[Encoder], t_list: &[usize], cfg: &ExchangerConfig, timing: &TimingConfig) -> Result<ScalingReport> {
    cfg.validate()?;
    if timing.repeats < 5 {
        return Err(Error::Config(format!("need at least 5 repeats, got {}", timing.repeats)));
    }
    if t_list.len() < 5 || t_list.windows(2).any(|w| w[0] >= w[1]) || t_list[0] == 0 {
        return Err(Error::Config("sequence lengths must be at least 5 increasing positive values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(timing.seed);
    let mut store = ParamStore::new();
    let exchanger = ExchangerParams::init(cfg, &mut store, "exchanger", &mut rng)?;
    let attention = SelfAttentionParams::init(cfg, &mut store, "attention", &mut rng)?;
    let inst = Instance {
        store,
        exchanger,
        attention,
    };

    struct Case {
        t: usize,
        encoder: Encoder,
        v: Tensor<f32>,
        p: Tensor<f32>,
        valid: Vec<bool>,
        inner: usize,
        samples: Vec<f64>,
    }
    let run = |c: &Case, n: usize| -> Result<f64> {
        let start = Instant::now();
        for _ in 0..n {
            std::hint::black_box(forward(c.encoder, &inst, &c.v, &c.p, &c.valid)?);
        }
        Ok(start.elapsed().as_secs_f64())
    };

    let min_sample = timing.min_sample_seconds;
    let mut cases = Vec::new();
    for &t in t_list {
        let data: Vec<f32> = (0..t * cfg.d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v = Tensor::new(&[t, cfg.d], data)?;
        let time = TimeAxis::all_valid((0..t).map(|i| i as f32).collect())?;
        let p = sinusoidal_pe::<f32>(&time, cfg.d, DEFAULT_MAX_PERIOD)?;
        for &encoder in encoders {
            let mut case = Case { t, encoder, v: v.clone(), p: p.clone(), valid: time.valid.clone(), inner: 1, samples: Vec::new() };
            run(&case, timing.warmup)?;
            while run(&case, case.inner)? < min_sample && case.inner < 1 << 20 {
                case.inner *= 2;
            }
            cases.push(case);
        }
    }
    for _ in 0..timing.repeats {
        for case in &mut cases {
            let elapsed = run(case, case.inner)?;
            case.samples.push(elapsed / case.inner as f64);
        }
    }
    let records: Vec<BenchRecord> = cases
        .into_iter()
        .map(|mut c| BenchRecord {
            encoder: c.encoder,
            t: c.t,
            n_clusters: cfg.n_clusters,
            d: cfg.d,
            heads: cfg.heads,
            flops: c.encoder.flops(cfg, c.t),
            min_seconds: c.samples.iter().copied().fold(f64::INFINITY, f64::min),
            median_seconds: median(&mut c.samples),
            repeats: timing.repeats,
            inner_loops: c.inner,
        })
        .collect();

    let mut slopes = Vec::new();
    for &enc in encoders {
        let rs: Vec<&BenchRecord> = records.iter().filter(|r| r.encoder == enc).collect();
        let ts: Vec<f64> = rs.iter().map(|r| r.t as f64).collect();
        let times: Vec<f64> = rs.iter().map(|r| r.median_seconds).collect();
        let flops: Vec<f64> = rs.iter().map(|r| r.flops as f64).collect();
        slopes.push(SlopeFit {
            encoder: enc,
            measured: loglog_slope(&ts, &times)?,
            analytic: loglog_slope(&ts, &flops)?,
        });
    }
    Ok(ScalingReport { records, slopes })
}
