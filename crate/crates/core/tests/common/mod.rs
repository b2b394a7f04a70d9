//! Shared helpers for the integration tests: plain-loop reference
//! implementations in f64 and a finite-difference gradient checker.
#![allow(dead_code)]

use exchanger::baseline::SelfAttentionParams;
use exchanger::exchanger::StageParams;
use exchanger::{ExchangerConfig, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub mod gradcases;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Mask with at least one valid entry; each step is dropped with probability `p_drop`.
pub fn random_mask(t: usize, p_drop: f64, rng: &mut impl Rng) -> Vec<bool> {
    let mut m: Vec<bool> = (0..t).map(|_| !rng.random_bool(p_drop)).collect();
    if !m.iter().any(|&x| x) {
        let i = rng.random_range(0..t);
        m[i] = true;
    }
    m
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let n = t.last_dim();
    t.data().chunks(n).map(|r| r.to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    let cols = m.first().map_or(0, |r| r.len());
    Tensor::new(&[m.len(), cols], m.concat()).unwrap()
}

pub fn pm(store: &ParamStore<f64>, id: ParamId) -> Mat {
    to_mat(store.get(id))
}

pub fn pv(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, m) = (b.len(), b[0].len());
    a.iter()
        .map(|row| {
            (0..m).map(|j| (0..n).map(|k| row[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    matmul(x, w).into_iter().map(|r| r.iter().zip(b).map(|(v, c)| v + c).collect()).collect()
}

fn mlp(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    let h: Mat = affine(x, w1, b1).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    affine(&h, w2, b2)
}

fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let rs = 1.0 / (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(i, v)| (v - mu) * rs * gamma[i] + beta[i]).collect()
        })
        .collect()
}

/// Multi-head attention written element by element. Invalid keys are left
/// out of the softmax entirely.
#[allow(clippy::too_many_arguments)]
fn attention(
    heads: usize,
    qc: &Mat,
    kc: &Mat,
    vals: &Mat,
    qp: Option<(&Mat, &Mat)>,
    key_valid: &[bool],
    scale: f64,
) -> Mat {
    let d = qc[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; qc.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..qc.len() {
            let mut logits = Vec::new();
            for j in 0..kc.len() {
                if !key_valid[j] {
                    continue;
                }
                let mut s: f64 = cols.clone().map(|c| qc[i][c] * kc[j][c]).sum();
                if let Some((q, k)) = qp {
                    s += cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>();
                }
                logits.push((j, s * scale));
            }
            let mx = logits.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x.1 - mx).exp()).sum();
            for &(j, s) in &logits {
                let a = (s - mx).exp() / z;
                for c in cols.clone() {
                    out[i][c] += a * vals[j][c];
                }
            }
        }
    }
    out
}

fn scale_of(cfg: &ExchangerConfig) -> f64 {
    1.0 / (2.0 * cfg.d as f64).sqrt()
}

/// Collect step: clusters `cv`, `cp` attend over tokens `v` with positions `p`.
pub fn collect_ref(cfg: &ExchangerConfig, s: &ParamStore<f64>, sp: &StageParams, cv: &Mat, cp: &Mat, v: &Mat, p: &Mat, mask: &[bool]) -> Mat {
    let qc = matmul(cv, &pm(s, sp.w_q));
    let kc = matmul(v, &pm(s, sp.w_k));
    let vals = matmul(v, &pm(s, sp.w_v));
    let qp = matmul(cp, &pm(s, sp.u_q));
    let kp = matmul(p, &pm(s, sp.u_k));
    let pos = cfg.position_queries.then_some((&qp, &kp));
    add(cv, &attention(cfg.heads, &qc, &kc, &vals, pos, mask, scale_of(cfg)))
}

pub fn update_ref(s: &ParamStore<f64>, sp: &StageParams, cv: &Mat) -> Mat {
    let x = layer_norm(cv, &pv(s, sp.tok_norm.0), &pv(s, sp.tok_norm.1));
    let mixed = mlp(&transpose(&x), &pm(s, sp.tok_fc1.0), &pv(s, sp.tok_fc1.1), &pm(s, sp.tok_fc2.0), &pv(s, sp.tok_fc2.1));
    let cv = add(cv, &transpose(&mixed));
    let x = layer_norm(&cv, &pv(s, sp.ch_norm.0), &pv(s, sp.ch_norm.1));
    let mixed = mlp(&x, &pm(s, sp.ch_fc1.0), &pv(s, sp.ch_fc1.1), &pm(s, sp.ch_fc2.0), &pv(s, sp.ch_fc2.1));
    add(&cv, &mixed)
}

#[allow(clippy::too_many_arguments)]
pub fn distribute_ref(cfg: &ExchangerConfig, s: &ParamStore<f64>, sp: &StageParams, v: &Mat, p: &Mat, cv: &Mat, cp: &Mat, mask: &[bool]) -> Mat {
    let qc = matmul(v, &pm(s, sp.wd_q));
    let kc = matmul(cv, &pm(s, sp.wd_k));
    let vals = matmul(cv, &pm(s, sp.wd_v));
    let qp = matmul(p, &pm(s, sp.ud_q));
    let kp = matmul(cp, &pm(s, sp.ud_k));
    let pos = cfg.position_queries.then_some((&qp, &kp));
    let z = attention(cfg.heads, &qc, &kc, &vals, pos, &vec![true; cv.len()], scale_of(cfg));
    let zv: Mat = z.iter().zip(v).map(|(a, b)| [a.as_slice(), b.as_slice()].concat()).collect();
    let zp = matmul(&zv, &pm(s, sp.w_proj));
    let f = mlp(&zp, &pm(s, sp.ffn_fc1.0), &pv(s, sp.ffn_fc1.1), &pm(s, sp.ffn_fc2.0), &pv(s, sp.ffn_fc2.1));
    let out = add(&zp, &f);
    zero_rows(out, mask)
}

fn zero_rows(mut m: Mat, mask: &[bool]) -> Mat {
    for (r, &keep) in m.iter_mut().zip(mask) {
        if !keep {
            r.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    m
}

pub fn exchanger_ref(cfg: &ExchangerConfig, s: &ParamStore<f64>, stages: &[StageParams], v: &Mat, p: &Mat, mask: &[bool]) -> Mat {
    let mut x = zero_rows(v.clone(), mask);
    for sp in stages {
        let cv = pm(s, sp.content_queries);
        let cp = pm(s, sp.position_queries);
        let c = collect_ref(cfg, s, sp, &cv, &cp, &x, p, mask);
        let c = update_ref(s, sp, &c);
        x = distribute_ref(cfg, s, sp, &x, p, &c, &cp, mask);
    }
    x
}

pub fn baseline_ref(cfg: &ExchangerConfig, s: &ParamStore<f64>, params: &SelfAttentionParams, v: &Mat, p: &Mat, mask: &[bool]) -> Mat {
    let mut x = zero_rows(v.clone(), mask);
    for lp in &params.layers {
        let qc = matmul(&x, &pm(s, lp.w_q));
        let kc = matmul(&x, &pm(s, lp.w_k));
        let vals = matmul(&x, &pm(s, lp.w_v));
        let qp = matmul(p, &pm(s, lp.u_q));
        let kp = matmul(p, &pm(s, lp.u_k));
        let pos = cfg.position_queries.then_some((&qp, &kp));
        let a = attention(cfg.heads, &qc, &kc, &vals, pos, mask, scale_of(cfg));
        let h = add(&x, &matmul(&a, &pm(s, lp.w_o)));
        let f = mlp(&h, &pm(s, lp.ffn_fc1.0), &pv(s, lp.ffn_fc1.1), &pm(s, lp.ffn_fc2.0), &pv(s, lp.ffn_fc2.1));
        x = zero_rows(add(&h, &f), mask);
    }
    x
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Builds a scalar from `f` by contracting its output with fixed random
/// weights (scalar outputs are used as they are).
type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var], &ParamStore<f64>) -> exchanger::Result<Var> + 'a;

fn objective(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    if g.value(out).len() == 1 {
        return g.sum(out);
    }
    let w = randn(g.shape(out), &mut rng(seed));
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn eval(inputs: &[Tensor<f64>], store: &ParamStore<f64>, f: &Build, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars, store).unwrap();
    let loss = objective(&mut g, out, seed);
    g.value(loss).data()[0]
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    pub checked: usize,
    pub worst_excess: f64,
}

/// Compares analytic gradients of every input and parameter against
/// central differences. Passes when `|a - n| <= rtol * max(|a|, |n|) + atol`
/// for every entry. Returns the number of entries checked.
pub fn grad_check(inputs: &[Tensor<f64>], store: &ParamStore<f64>, f: &Build, rtol: f64, atol: f64, seed: u64) -> Result<GradReport, String> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars, store).map_err(|e| e.to_string())?;
    let loss = objective(&mut g, out, seed);
    g.backward(loss).map_err(|e| e.to_string())?;
    let pgrads = g.param_grads(store);
    let h = 1e-6;
    let mut report = GradReport::default();
    let mut check = |what: String, a: f64, n: f64| -> Result<(), String> {
        let tol = rtol * a.abs().max(n.abs()) + atol;
        let err = (a - n).abs();
        report.checked += 1;
        report.worst_excess = report.worst_excess.max(err / tol);
        if err > tol || !a.is_finite() {
            return Err(format!("{what}: analytic {a:e}, numeric {n:e}"));
        }
        Ok(())
    };
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let n = (eval(&plus, store, f, seed) - eval(&minus, store, f, seed)) / (2.0 * h);
            check(format!("input {k}[{i}]"), analytic[i], n)?;
        }
    }
    for id in store.ids() {
        let len = store.get(id).len();
        let analytic = pgrads.get(id).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; len]);
        for i in 0..len {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= h;
            let n = (eval(inputs, &plus, f, seed) - eval(inputs, &minus, f, seed)) / (2.0 * h);
            check(format!("{}[{i}]", store.name(id)), analytic[i], n)?;
        }
    }
    Ok(report)
}

pub struct EquivInstance {
    pub cfg: ExchangerConfig,
    pub store: ParamStore<f64>,
    pub params: exchanger::ExchangerParams,
    pub v: Mat,
    pub p: Mat,
    pub mask: Vec<bool>,
}

/// Random encoder and input with `T <= 32`, `d <= 64`.
pub fn equiv_instance(seed: u64) -> EquivInstance {
    let mut r = rng(seed);
    let heads = [1, 2, 4][r.random_range(0..3)];
    let d = heads * 2 * r.random_range(1..=64 / (2 * heads));
    let cfg = ExchangerConfig {
        d,
        n_clusters: r.random_range(1..=8),
        heads,
        stages: r.random_range(1..=2),
        ffn_expansion: r.random_range(1..=2),
        token_hidden: r.random_range(1..=4),
        position_queries: r.random_bool(0.8),
        query_init_std: 1.0,
    };
    let t = r.random_range(1..=32);
    let mut store = ParamStore::new();
    let params = exchanger::ExchangerParams::init(&cfg, &mut store, "x", &mut r).unwrap();
    let time = exchanger::TimeAxis::all_valid((0..t).map(|_| r.random_range(1.0..365.0f32)).collect()).unwrap();
    let p = to_mat(&exchanger::encoding::sinusoidal_pe::<f64>(&time, d, 10_000.0).unwrap());
    let v = to_mat(&randn(&[t, d], &mut r));
    let mask = random_mask(t, 0.25, &mut r);
    EquivInstance { cfg, store, params, v, p, mask }
}

pub fn encode(x: &EquivInstance, v: &Mat, p: &Mat, mask: &[bool]) -> Mat {
    let mut g = Graph::new();
    let (vv, pp) = (g.constant(from_mat(v)), g.constant(from_mat(p)));
    let out = exchanger::exchanger::exchanger_forward(&mut g, &x.store, &x.params, vv, pp, mask).unwrap();
    to_mat(g.value(out))
}

/// Largest deviation between `f(permuted input)` and the permuted `f(input)`.
pub fn permutation_gap(seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let x = equiv_instance(seed);
    let mut perm: Vec<usize> = (0..x.v.len()).collect();
    perm.shuffle(&mut rng(seed ^ 0xabc));
    let pv: Mat = perm.iter().map(|&i| x.v[i].clone()).collect();
    let pp: Mat = perm.iter().map(|&i| x.p[i].clone()).collect();
    let pm: Vec<bool> = perm.iter().map(|&i| x.mask[i]).collect();
    let base = encode(&x, &x.v, &x.p, &x.mask);
    let permuted = encode(&x, &pv, &pp, &pm);
    let want: Mat = perm.iter().map(|&i| base[i].clone()).collect();
    max_diff(&permuted, &want)
}

/// Largest change of the valid output rows after appending masked steps
/// holding arbitrary values and positions.
pub fn mask_extension_gap(seed: u64) -> f64 {
    let x = equiv_instance(seed);
    let mut r = rng(seed ^ 0xdef);
    let k = r.random_range(1..=8);
    let mut v = x.v.clone();
    let mut p = x.p.clone();
    let mut mask = x.mask.clone();
    for _ in 0..k {
        v.push((0..x.cfg.d).map(|_| r.random_range(-100.0..100.0)).collect());
        p.push((0..x.cfg.d).map(|_| r.random_range(-1.0..1.0)).collect());
        mask.push(false);
    }
    let base = encode(&x, &x.v, &x.p, &x.mask);
    let ext = encode(&x, &v, &p, &mask);
    let keep = |m: &Mat| -> Mat { m.iter().zip(&x.mask).filter(|(_, &k)| k).map(|(r, _)| r.clone()).collect() };
    max_diff(&keep(&base), &keep(&ext[..base.len()].to_vec()))
}

/// Largest deviation of each library step from its loop reference on one
/// random tiny instance (`T <= 6`, `N <= 3`, `h <= 2`).
#[derive(Debug, Clone, Copy)]
pub struct OracleGaps {
    pub collect: f64,
    pub update: f64,
    pub distribute: f64,
    pub encoder: f64,
    pub baseline: f64,
}

pub fn oracle_gaps(seed: u64) -> OracleGaps {
    use exchanger::baseline::self_attention_baseline;
    use exchanger::exchanger::{collect, distribute, exchanger_forward, update};

    let mut r = rng(seed);
    let heads = r.random_range(1..=2);
    let cfg = ExchangerConfig {
        d: heads * 2 * r.random_range(1..=2),
        n_clusters: r.random_range(1..=3),
        heads,
        stages: r.random_range(1..=2),
        ffn_expansion: r.random_range(1..=2),
        token_hidden: r.random_range(1..=4),
        position_queries: r.random_bool(0.8),
        query_init_std: 1.0,
    };
    let t = r.random_range(1..=6);
    let mut s = ParamStore::new();
    let params = exchanger::ExchangerParams::init(&cfg, &mut s, "x", &mut r).unwrap();
    let attention = SelfAttentionParams::init(&cfg, &mut s, "sa", &mut r).unwrap();
    for id in s.ids().collect::<Vec<_>>() {
        for v in s.get_mut(id).data_mut() {
            *v += 0.1 * r.random_range(-1.0..1.0);
        }
    }
    let v = to_mat(&randn(&[t, cfg.d], &mut r));
    let p = to_mat(&randn(&[t, cfg.d], &mut r));
    let cv = to_mat(&randn(&[cfg.n_clusters, cfg.d], &mut r));
    let cp = to_mat(&randn(&[cfg.n_clusters, cfg.d], &mut r));
    let mask = random_mask(t, 0.3, &mut r);
    let sp = &params.stages[0];

    let mut g = Graph::new();
    let (cvv, cpv) = (g.constant(from_mat(&cv)), g.constant(from_mat(&cp)));
    let (vv, pp) = (g.constant(from_mat(&v)), g.constant(from_mat(&p)));
    let c = collect(&mut g, &s, sp, &cfg, cvv, cpv, vv, pp, &mask).unwrap();
    let u = update(&mut g, &s, sp, cvv).unwrap();
    let d = distribute(&mut g, &s, sp, &cfg, vv, pp, cvv, cpv, &mask).unwrap();
    let e = exchanger_forward(&mut g, &s, &params, vv, pp, &mask).unwrap();
    let b = self_attention_baseline(&mut g, &s, &attention, vv, pp, &mask).unwrap();
    let got = |x: Var| to_mat(g.value(x));
    OracleGaps {
        collect: max_diff(&got(c), &collect_ref(&cfg, &s, sp, &cv, &cp, &v, &p, &mask)),
        update: max_diff(&got(u), &update_ref(&s, sp, &cv)),
        distribute: max_diff(&got(d), &distribute_ref(&cfg, &s, sp, &v, &p, &cv, &cp, &mask)),
        encoder: max_diff(&got(e), &exchanger_ref(&cfg, &s, &params.stages, &v, &p, &mask)),
        baseline: max_diff(&got(b), &baseline_ref(&cfg, &s, &attention, &v, &p, &mask)),
    }
}
