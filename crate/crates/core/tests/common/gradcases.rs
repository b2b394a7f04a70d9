//! Gradient-check cases, one per differentiable operation plus the
//! composite encoder paths. Each case draws its shapes and values from the
//! seed it is given.

use exchanger::baseline::{self_attention_baseline, SelfAttentionParams};
use exchanger::exchanger::{collect, distribute, exchanger_forward, update};
use exchanger::heads::{cosine_softmax_loss, project, ClassifierConfig, ClassifierParams};
use exchanger::{ExchangerConfig, ExchangerParams, Graph, ParamStore, Tensor, Var, IGNORE_INDEX};
use rand::Rng;

use super::{grad_check, randn, random_mask, rng, GradReport};

pub const RTOL: f64 = 1e-4;
pub const ATOL: f64 = 1e-7;

pub type CaseFn = fn(u64) -> Result<GradReport, String>;

type R = exchanger::Result<Var>;

fn run(inputs: &[Tensor<f64>], store: &ParamStore<f64>, seed: u64, f: impl Fn(&mut Graph<f64>, &[Var], &ParamStore<f64>) -> R) -> Result<GradReport, String> {
    grad_check(inputs, store, &f, RTOL, ATOL, seed)
}

fn dims(seed: u64) -> (usize, usize, usize, usize) {
    let mut r = rng(seed);
    (r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4))
}

fn matmul(seed: u64) -> Result<GradReport, String> {
    let (b, m, k, n) = dims(seed);
    let mut r = rng(seed ^ 1);
    let mut store = ParamStore::new();
    let w = store.add("w", randn(&[k, n], &mut r));
    run(&[randn(&[b, m, k], &mut r)], &store, seed, |g, x, s| {
        let w = g.param(s, w);
        g.matmul(x[0], w)
    })
}

fn bmm(seed: u64) -> Result<GradReport, String> {
    let (b, m, k, n) = dims(seed);
    let mut r = rng(seed ^ 1);
    let trans = seed.is_multiple_of(2);
    let bs = if trans { [b, n, k] } else { [b, k, n] };
    run(&[randn(&[b, m, k], &mut r), randn(&bs, &mut r)], &ParamStore::new(), seed, |g, x, _| g.bmm(x[0], x[1], trans))
}

fn transpose(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    run(&[randn(&[b, m, n], &mut rng(seed))], &ParamStore::new(), seed, |g, x, _| g.transpose(x[0]))
}

fn reshape(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    run(&[randn(&[b, m, n], &mut rng(seed))], &ParamStore::new(), seed, |g, x, _| g.reshape(x[0], &[b * m * n]))
}

fn add(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    let mut r = rng(seed);
    run(&[randn(&[b, m, n], &mut r), randn(&[b, m, n], &mut r)], &ParamStore::new(), seed, |g, x, _| g.add(x[0], x[1]))
}

fn add_bcast(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    let mut r = rng(seed);
    let bias = if seed.is_multiple_of(2) { vec![n] } else { vec![m, n] };
    run(&[randn(&[b, m, n], &mut r), randn(&bias, &mut r)], &ParamStore::new(), seed, |g, x, _| g.add_bcast(x[0], x[1]))
}

fn mul(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    let mut r = rng(seed);
    run(&[randn(&[b, m, n], &mut r), randn(&[b, m, n], &mut r)], &ParamStore::new(), seed, |g, x, _| g.mul(x[0], x[1]))
}

fn mul_scalar(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    let mut r = rng(seed);
    run(&[randn(&[b, m, n], &mut r), randn(&[], &mut r)], &ParamStore::new(), seed, |g, x, _| g.mul_scalar(x[0], x[1]))
}

fn scale(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    run(&[randn(&[b, m, n], &mut rng(seed))], &ParamStore::new(), seed, |g, x, _| Ok(g.scale(x[0], -0.37)))
}

fn gelu(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    run(&[randn(&[b, m, n], &mut rng(seed))], &ParamStore::new(), seed, |g, x, _| Ok(g.gelu(x[0])))
}

fn softmax(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    run(&[randn(&[b, m, n + 1], &mut rng(seed))], &ParamStore::new(), seed, |g, x, _| Ok(g.softmax(x[0])))
}

fn layer_norm(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    let n = n + 1;
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let gamma = store.add("gamma", randn(&[n], &mut r));
    let beta = store.add("beta", randn(&[n], &mut r));
    run(&[randn(&[b, m, n], &mut r)], &store, seed, |g, x, s| {
        let (gm, bt) = (g.param(s, gamma), g.param(s, beta));
        g.layer_norm(x[0], gm, bt, 1e-5)
    })
}

fn concat(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, k) = dims(seed);
    let mut r = rng(seed);
    run(&[randn(&[b, m, n], &mut r), randn(&[b, m, k], &mut r)], &ParamStore::new(), seed, |g, x, _| g.concat(&[x[0], x[1], x[0]]))
}

fn slice_last(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    let n = n + 1;
    run(&[randn(&[b, m, n], &mut rng(seed))], &ParamStore::new(), seed, |g, x, _| g.slice_last(x[0], 1, n - 1))
}

fn repeat_batch(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    run(&[randn(&[m, n], &mut rng(seed))], &ParamStore::new(), seed, |g, x, _| Ok(g.repeat_batch(x[0], b + 1)))
}

fn mask_rows(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    let mut r = rng(seed);
    let keep = random_mask(m, 0.4, &mut r);
    run(&[randn(&[b, m, n], &mut r)], &ParamStore::new(), seed, |g, x, _| g.mask_rows(x[0], &keep))
}

fn weighted_mean_rows(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    let mut r = rng(seed);
    let w: Vec<f64> = (0..m).map(|i| if i == 0 { 1.0 } else { r.random_range(0.0..2.0) }).collect();
    run(&[randn(&[b, m, n], &mut r)], &ParamStore::new(), seed, |g, x, _| g.weighted_mean_rows(x[0], &w))
}

fn sum(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    run(&[randn(&[b, m, n], &mut rng(seed))], &ParamStore::new(), seed, |g, x, _| {
        let sq = g.mul(x[0], x[0])?;
        Ok(g.sum(sq))
    })
}

fn mean(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    run(&[randn(&[b, m, n], &mut rng(seed))], &ParamStore::new(), seed, |g, x, _| {
        let sq = g.mul(x[0], x[0])?;
        Ok(g.mean(sq))
    })
}

fn l2_normalize(seed: u64) -> Result<GradReport, String> {
    let (b, m, n, _) = dims(seed);
    run(&[randn(&[b, m, n + 1], &mut rng(seed))], &ParamStore::new(), seed, |g, x, _| Ok(g.l2_normalize(x[0], 1e-8)))
}

fn labels(rows: usize, k: usize, ignore: bool, r: &mut impl Rng) -> Vec<usize> {
    let mut y: Vec<usize> = (0..rows).map(|_| r.random_range(0..k)).collect();
    if ignore && rows > 1 {
        y[r.random_range(0..rows)] = IGNORE_INDEX;
    }
    y
}

fn cross_entropy(seed: u64) -> Result<GradReport, String> {
    let (_, m, k, _) = dims(seed);
    let mut r = rng(seed);
    let y = labels(m, k + 1, false, &mut r);
    run(&[randn(&[m, k + 1], &mut r)], &ParamStore::new(), seed, |g, x, _| g.cross_entropy(x[0], &y))
}

fn focal_loss(seed: u64) -> Result<GradReport, String> {
    let (_, m, k, _) = dims(seed);
    let mut r = rng(seed);
    let y = labels(m + 1, k + 1, true, &mut r);
    let gamma = [0.0, 0.5, 2.0][seed as usize % 3];
    run(&[randn(&[m + 1, k + 1], &mut r)], &ParamStore::new(), seed, |g, x, _| g.focal_loss(x[0], &y, gamma))
}

fn tiny_config(seed: u64) -> ExchangerConfig {
    let mut r = rng(seed ^ 7);
    let heads = r.random_range(1..=2);
    ExchangerConfig {
        d: 2 * heads,
        n_clusters: r.random_range(1..=3),
        heads,
        stages: r.random_range(1..=2),
        ffn_expansion: 1,
        token_hidden: r.random_range(1..=4),
        position_queries: r.random_bool(0.8),
        query_init_std: 1.0,
    }
}

struct Setup {
    cfg: ExchangerConfig,
    store: ParamStore<f64>,
    params: ExchangerParams,
    inputs: Vec<Tensor<f64>>,
    mask: Vec<bool>,
}

fn setup(seed: u64) -> Setup {
    let cfg = tiny_config(seed);
    let mut r = rng(seed);
    let t = r.random_range(1..=4);
    let mut store = ParamStore::new();
    let params = ExchangerParams::init(&cfg, &mut store, "x", &mut r).unwrap();
    // perturb zero-initialized biases and unit norms so every path is exercised
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += 0.1 * r.random_range(-1.0..1.0);
        }
    }
    let batched = seed % 2 == 1;
    let vs: Vec<usize> = if batched { vec![2, t, cfg.d] } else { vec![t, cfg.d] };
    let inputs = vec![randn(&vs, &mut r), randn(&[t, cfg.d], &mut r)];
    let mask = random_mask(t, 0.3, &mut r);
    Setup { cfg, store, params, inputs, mask }
}

fn exchanger_full(seed: u64) -> Result<GradReport, String> {
    let s = setup(seed);
    run(&s.inputs, &s.store, seed, |g, x, st| exchanger_forward(g, st, &s.params, x[0], x[1], &s.mask))
}

fn collect_step(seed: u64) -> Result<GradReport, String> {
    let s = setup(seed);
    let sp = &s.params.stages[0];
    run(&s.inputs, &s.store, seed, |g, x, st| {
        let (cv, cp) = (g.param(st, sp.content_queries), g.param(st, sp.position_queries));
        collect(g, st, sp, &s.cfg, cv, cp, x[0], x[1], &s.mask)
    })
}

fn update_step(seed: u64) -> Result<GradReport, String> {
    let s = setup(seed);
    let sp = &s.params.stages[0];
    let cv = randn(&[s.cfg.n_clusters, s.cfg.d], &mut rng(seed ^ 3));
    run(&[cv], &s.store, seed, |g, x, st| update(g, st, sp, x[0]))
}

fn distribute_step(seed: u64) -> Result<GradReport, String> {
    let s = setup(seed);
    let sp = &s.params.stages[0];
    let mut inputs = s.inputs.clone();
    inputs.push(randn(&[s.cfg.n_clusters, s.cfg.d], &mut rng(seed ^ 3)));
    run(&inputs, &s.store, seed, |g, x, st| {
        let cp = g.param(st, sp.position_queries);
        distribute(g, st, sp, &s.cfg, x[0], x[1], x[2], cp, &s.mask)
    })
}

fn baseline(seed: u64) -> Result<GradReport, String> {
    let s = setup(seed);
    let mut store = ParamStore::new();
    let params = SelfAttentionParams::init(&s.cfg, &mut store, "sa", &mut rng(seed ^ 5)).unwrap();
    run(&s.inputs, &store, seed, |g, x, st| self_attention_baseline(g, st, &params, x[0], x[1], &s.mask))
}

fn cosine_loss(seed: u64) -> Result<GradReport, String> {
    let mut r = rng(seed);
    let (d, k, rows) = (r.random_range(2..=4), r.random_range(2..=4), r.random_range(1..=3));
    let cfg = ClassifierConfig { hidden: 4, proj: 3, init_scale: 3.0 };
    let mut store = ParamStore::new();
    let params = ClassifierParams::init(d, k, &cfg, &mut store, "head", &mut r);
    let y = labels(rows, k, false, &mut r);
    run(&[randn(&[rows, d], &mut r)], &store, seed, |g, x, st| {
        let f = project(g, st, &params, x[0])?;
        cosine_softmax_loss(g, st, &params, f, &y)
    })
}

pub const CASES: &[(&str, CaseFn)] = &[
    ("matmul", matmul),
    ("bmm", bmm),
    ("transpose", transpose),
    ("reshape", reshape),
    ("add", add),
    ("add_bcast", add_bcast),
    ("mul", mul),
    ("mul_scalar", mul_scalar),
    ("scale", scale),
    ("gelu", gelu),
    ("softmax", softmax),
    ("layer_norm", layer_norm),
    ("concat", concat),
    ("slice_last", slice_last),
    ("repeat_batch", repeat_batch),
    ("mask_rows", mask_rows),
    ("weighted_mean_rows", weighted_mean_rows),
    ("sum", sum),
    ("mean", mean),
    ("l2_normalize", l2_normalize),
    ("cross_entropy", cross_entropy),
    ("focal_loss", focal_loss),
    ("cosine_softmax_loss", cosine_loss),
    ("collect", collect_step),
    ("update", update_step),
    ("distribute", distribute_step),
    ("self_attention_baseline", baseline),
    ("exchanger_forward", exchanger_full),
];
