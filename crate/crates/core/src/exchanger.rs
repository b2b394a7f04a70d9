//! Temporal encoder built from learnable cluster queries.
//!
//! Each stage runs three steps over a set of temporal tokens `V` with
//! position embeddings `P`:
//!
//! * **collect**: content queries `Cv` (with position queries `Cp`) attend
//!   over the tokens and add what they gather to `Cv`;
//! * **update**: the clusters exchange information through a token-mixing
//!   MLP across clusters followed by a channel-mixing MLP;
//! * **distribute**: tokens attend over the updated clusters, the result is
//!   fused with the input tokens and passed through a feed-forward block.
//!
//! Content and position attention are untied: logits are the sum of a
//! content-content and a position-position scaled dot product, both scaled
//! by `1 / sqrt(2 d)`. Cost is linear in the number of tokens.
//!
//! Tokens are batched as `[B, T, d]`: `B` sequences that share one time
//! axis (the pixels of a parcel or an image), so `P` is `[T, d]` and the
//! mask has length `T`. A plain `[T, d]` input is treated as `B = 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Additive logit bias for masked keys.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExchangerConfig {
    /// Token and cluster width.
    pub d: usize,
    pub n_clusters: usize,
    pub heads: usize,
    pub stages: usize,
    /// Hidden width multiplier of the FFN and the channel-mixing MLP.
    pub ffn_expansion: usize,
    /// Hidden width of the token-mixing MLP across clusters.
    pub token_hidden: usize,
    /// When false the position-attention terms are dropped, which is the
    /// same as pinning every `U` projection to zero.
    pub position_queries: bool,
    pub query_init_std: f64,
}

impl Default for ExchangerConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_clusters: 8,
            heads: 4,
            stages: 2,
            ffn_expansion: 4,
            token_hidden: 32,
            position_queries: true,
            query_init_std: 0.02,
        }
    }
}

impl ExchangerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("n_clusters", self.n_clusters),
            ("heads", self.heads),
            ("stages", self.stages),
            ("ffn_expansion", self.ffn_expansion),
            ("token_hidden", self.token_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("exchanger.{name} must be positive")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn logit_scale(&self) -> f64 {
        1.0 / (2.0 * self.d as f64).sqrt()
    }
}

/// Learnable state of one stage.
#[derive(Clone, Debug)]
pub struct StageParams {
    pub content_queries: ParamId,
    pub position_queries: ParamId,
    // collect
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub u_q: ParamId,
    pub u_k: ParamId,
    // update: token mixing across clusters
    pub tok_norm: (ParamId, ParamId),
    pub tok_fc1: (ParamId, ParamId),
    pub tok_fc2: (ParamId, ParamId),
    // update: channel mixing
    pub ch_norm: (ParamId, ParamId),
    pub ch_fc1: (ParamId, ParamId),
    pub ch_fc2: (ParamId, ParamId),
    // distribute
    pub wd_q: ParamId,
    pub wd_k: ParamId,
    pub wd_v: ParamId,
    pub ud_q: ParamId,
    pub ud_k: ParamId,
    pub w_proj: ParamId,
    pub ffn_fc1: (ParamId, ParamId),
    pub ffn_fc2: (ParamId, ParamId),
}

impl StageParams {
    fn register<T: Scalar, R: Rng>(
        cfg: &ExchangerConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Self {
        let (d, n, e, th) = (cfg.d, cfg.n_clusters, cfg.ffn_expansion, cfg.token_hidden);
        let name = |s: &str| format!("{prefix}.{s}");
        let pos_proj = |store: &mut ParamStore<T>, s: &str, rng: &mut R| {
            if cfg.position_queries {
                store.fan_in(name(s), &[d, d], rng)
            } else {
                store.zeros(name(s), &[d, d])
            }
        };
        let content_queries = store.normal(name("content_queries"), &[n, d], cfg.query_init_std, rng);
        let position_queries = store.normal(name("position_queries"), &[n, d], cfg.query_init_std, rng);
        let w_q = store.fan_in(name("collect.w_q"), &[d, d], rng);
        let w_k = store.fan_in(name("collect.w_k"), &[d, d], rng);
        let w_v = store.fan_in(name("collect.w_v"), &[d, d], rng);
        let u_q = pos_proj(store, "collect.u_q", rng);
        let u_k = pos_proj(store, "collect.u_k", rng);
        let tok_norm = (store.ones(name("update.tok_norm.gamma"), &[d]), store.zeros(name("update.tok_norm.beta"), &[d]));
        let tok_fc1 = (store.fan_in(name("update.tok_fc1.w"), &[n, th], rng), store.zeros(name("update.tok_fc1.b"), &[th]));
        let tok_fc2 = (store.fan_in(name("update.tok_fc2.w"), &[th, n], rng), store.zeros(name("update.tok_fc2.b"), &[n]));
        let ch_norm = (store.ones(name("update.ch_norm.gamma"), &[d]), store.zeros(name("update.ch_norm.beta"), &[d]));
        let ch_fc1 = (store.fan_in(name("update.ch_fc1.w"), &[d, e * d], rng), store.zeros(name("update.ch_fc1.b"), &[e * d]));
        let ch_fc2 = (store.fan_in(name("update.ch_fc2.w"), &[e * d, d], rng), store.zeros(name("update.ch_fc2.b"), &[d]));
        let wd_q = store.fan_in(name("distribute.w_q"), &[d, d], rng);
        let wd_k = store.fan_in(name("distribute.w_k"), &[d, d], rng);
        let wd_v = store.fan_in(name("distribute.w_v"), &[d, d], rng);
        let ud_q = pos_proj(store, "distribute.u_q", rng);
        let ud_k = pos_proj(store, "distribute.u_k", rng);
        let w_proj = store.fan_in(name("distribute.w_proj"), &[2 * d, d], rng);
        let ffn_fc1 = (store.fan_in(name("distribute.ffn_fc1.w"), &[d, e * d], rng), store.zeros(name("distribute.ffn_fc1.b"), &[e * d]));
        let ffn_fc2 = (store.fan_in(name("distribute.ffn_fc2.w"), &[e * d, d], rng), store.zeros(name("distribute.ffn_fc2.b"), &[d]));
        Self {
            content_queries,
            position_queries,
            w_q,
            w_k,
            w_v,
            u_q,
            u_k,
            tok_norm,
            tok_fc1,
            tok_fc2,
            ch_norm,
            ch_fc1,
            ch_fc2,
            wd_q,
            wd_k,
            wd_v,
            ud_q,
            ud_k,
            w_proj,
            ffn_fc1,
            ffn_fc2,
        }
    }

    /// Every parameter of the stage.
    pub fn all(&self) -> Vec<ParamId> {
        let pairs = [
            self.tok_norm,
            self.tok_fc1,
            self.tok_fc2,
            self.ch_norm,
            self.ch_fc1,
            self.ch_fc2,
            self.ffn_fc1,
            self.ffn_fc2,
        ];
        let mut ids = vec![
            self.content_queries,
            self.position_queries,
            self.w_q,
            self.w_k,
            self.w_v,
            self.u_q,
            self.u_k,
            self.wd_q,
            self.wd_k,
            self.wd_v,
            self.ud_q,
            self.ud_k,
            self.w_proj,
        ];
        ids.extend(pairs.iter().flat_map(|&(a, b)| [a, b]));
        ids
    }
}

/// All stages of one encoder.
#[derive(Clone, Debug)]
pub struct ExchangerParams {
    pub config: ExchangerConfig,
    pub stages: Vec<StageParams>,
}

impl ExchangerParams {
    /// Registers the parameters of every stage under `prefix.stage{i}`.
    pub fn init<T: Scalar, R: Rng>(
        config: &ExchangerConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let stages = (0..config.stages)
            .map(|i| StageParams::register(config, store, &format!("{prefix}.stage{i}"), rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }
}

struct Batched {
    v: Var,
    was_2d: bool,
    batch: usize,
    t: usize,
}

fn batched<T: Scalar>(g: &mut Graph<T>, v: Var, d: usize) -> Result<Batched> {
    let s = g.shape(v).to_vec();
    match *s.as_slice() {
        [t, dd] if dd == d => Ok(Batched { v: g.reshape(v, &[1, t, d])?, was_2d: true, batch: 1, t }),
        [b, t, dd] if dd == d => Ok(Batched { v, was_2d: false, batch: b, t }),
        _ => Err(Error::Dimension(format!("tokens must be [T, {d}] or [B, T, {d}], got {s:?}"))),
    }
}

fn unbatch<T: Scalar>(g: &mut Graph<T>, out: Var, was_2d: bool) -> Result<Var> {
    if was_2d {
        let s = g.shape(out)[1..].to_vec();
        g.reshape(out, &s)
    } else {
        Ok(out)
    }
}

fn check_positions<T: Scalar>(g: &Graph<T>, p: Var, t: usize, d: usize, mask: &[bool]) -> Result<()> {
    if g.shape(p) != [t, d] {
        return Err(Error::dims("position embeddings", g.shape(p), &[t, d]));
    }
    if mask.len() != t {
        return Err(Error::Dimension(format!("mask of length {} for {t} steps", mask.len())));
    }
    Ok(())
}

fn key_bias<T: Scalar>(mask: &[bool]) -> Option<Tensor<T>> {
    if mask.iter().all(|&m| m) {
        return None;
    }
    let data = mask
        .iter()
        .map(|&m| if m { T::zero() } else { T::of(MASK_BIAS) })
        .collect();
    Some(Tensor::from_parts(vec![mask.len()], data))
}

fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    let y = g.matmul(x, w)?;
    g.add_bcast(y, b)
}

fn proj<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, w: ParamId) -> Result<Var> {
    let w = g.param(store, w);
    g.matmul(x, w)
}

/// Multi-head untied attention where queries and keys come in content and
/// (optionally) position pairs. Position terms are shared over the batch.
///
/// `q_c: [B, M, d]`, `k_c: [B, L, d]`, `values: [B, L, d]`,
/// `q_p: [M, d]`, `k_p: [L, d]`; queries are pre-scaled.
#[allow(clippy::too_many_arguments)]
fn untied_attention<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ExchangerConfig,
    q_c: Var,
    k_c: Var,
    values: Var,
    pos: Option<(Var, Var)>,
    bias: Option<Var>,
) -> Result<Var> {
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_last(q_c, h * dh, dh)?;
        let kh = g.slice_last(k_c, h * dh, dh)?;
        let mut logits = g.bmm(qh, kh, true)?;
        if let Some((q_p, k_p)) = pos {
            let qph = g.slice_last(q_p, h * dh, dh)?;
            let kph = g.slice_last(k_p, h * dh, dh)?;
            let lp = g.bmm(qph, kph, true)?;
            logits = g.add_bcast(logits, lp)?;
        }
        if let Some(b) = bias {
            logits = g.add_bcast(logits, b)?;
        }
        let attn = g.softmax(logits);
        let vh = g.slice_last(values, h * dh, dh)?;
        heads.push(g.bmm(attn, vh, false)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        g.concat(&heads)
    }
}

/// Collect step: clusters gather from the tokens.
///
/// `cv`, `cp` are `[N, d]` (or `cv` already batched as `[B, N, d]`); `v` is
/// `[T, d]` or `[B, T, d]`; `p` is `[T, d]`. Returns the updated content
/// clusters, `[N, d]` or `[B, N, d]` following `v`.
#[allow(clippy::too_many_arguments)]
pub fn collect<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    sp: &StageParams,
    cfg: &ExchangerConfig,
    cv: Var,
    cp: Var,
    v: Var,
    p: Var,
    mask: &[bool],
) -> Result<Var> {
    let Batched { v, was_2d, batch, t } = batched(g, v, cfg.d)?;
    check_positions(g, p, t, cfg.d, mask)?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::Data("collect: every time step is masked".into()));
    }
    let scale = cfg.logit_scale();

    let (cv_b, q_c) = match g.shape(cv).len() {
        2 => {
            let q = proj(g, store, cv, sp.w_q)?;
            let q = g.scale(q, scale);
            (g.repeat_batch(cv, batch), g.repeat_batch(q, batch))
        }
        _ => {
            let q = proj(g, store, cv, sp.w_q)?;
            (cv, g.scale(q, scale))
        }
    };
    let k_c = proj(g, store, v, sp.w_k)?;
    let values = proj(g, store, v, sp.w_v)?;
    let pos = if cfg.position_queries {
        let q = proj(g, store, cp, sp.u_q)?;
        let q = g.scale(q, scale);
        let k = proj(g, store, p, sp.u_k)?;
        Some((q, k))
    } else {
        None
    };
    let bias = key_bias(mask).map(|b| g.constant(b));
    let gathered = untied_attention(g, cfg, q_c, k_c, values, pos, bias)?;
    let out = g.add(cv_b, gathered)?;
    unbatch(g, out, was_2d)
}

/// Update step: token mixing across clusters, then channel mixing, each a
/// pre-norm residual MLP. Position queries are not modified.
pub fn update<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    sp: &StageParams,
    cv: Var,
) -> Result<Var> {
    let (gamma, beta) = (g.param(store, sp.tok_norm.0), g.param(store, sp.tok_norm.1));
    let x = g.layer_norm(cv, gamma, beta, 1e-5)?;
    let xt = g.transpose(x)?;
    let h = linear(g, store, xt, sp.tok_fc1)?;
    let h = g.gelu(h);
    let h = linear(g, store, h, sp.tok_fc2)?;
    let h = g.transpose(h)?;
    let cv = g.add(cv, h)?;

    let (gamma, beta) = (g.param(store, sp.ch_norm.0), g.param(store, sp.ch_norm.1));
    let x = g.layer_norm(cv, gamma, beta, 1e-5)?;
    let h = linear(g, store, x, sp.ch_fc1)?;
    let h = g.gelu(h);
    let h = linear(g, store, h, sp.ch_fc2)?;
    g.add(cv, h)
}

/// Distribute step: tokens attend over the clusters; the gathered context
/// is fused with the tokens by `W_proj`, followed by a residual FFN.
/// Rows of masked steps are zero in the output.
#[allow(clippy::too_many_arguments)]
pub fn distribute<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    sp: &StageParams,
    cfg: &ExchangerConfig,
    v: Var,
    p: Var,
    cv: Var,
    cp: Var,
    mask: &[bool],
) -> Result<Var> {
    let Batched { v, was_2d, batch, t } = batched(g, v, cfg.d)?;
    check_positions(g, p, t, cfg.d, mask)?;
    let cv = if g.shape(cv).len() == 2 { g.repeat_batch(cv, batch) } else { cv };
    let scale = cfg.logit_scale();

    let q_c = proj(g, store, v, sp.wd_q)?;
    let q_c = g.scale(q_c, scale);
    let k_c = proj(g, store, cv, sp.wd_k)?;
    let values = proj(g, store, cv, sp.wd_v)?;
    let pos = if cfg.position_queries {
        let q = proj(g, store, p, sp.ud_q)?;
        let q = g.scale(q, scale);
        let k = proj(g, store, cp, sp.ud_k)?;
        Some((q, k))
    } else {
        None
    };
    let z = untied_attention(g, cfg, q_c, k_c, values, pos, None)?;
    let zv = g.concat(&[z, v])?;
    let z_proj = proj(g, store, zv, sp.w_proj)?;
    let h = linear(g, store, z_proj, sp.ffn_fc1)?;
    let h = g.gelu(h);
    let h = linear(g, store, h, sp.ffn_fc2)?;
    let out = g.add(z_proj, h)?;
    let out = g.mask_rows(out, mask)?;
    unbatch(g, out, was_2d)
}

/// One collect-update-distribute stage.
pub fn stage_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    sp: &StageParams,
    cfg: &ExchangerConfig,
    v: Var,
    p: Var,
    mask: &[bool],
) -> Result<Var> {
    let cv = g.param(store, sp.content_queries);
    let cp = g.param(store, sp.position_queries);
    let clusters = collect(g, store, sp, cfg, cv, cp, v, p, mask)?;
    let clusters = update(g, store, sp, clusters)?;
    distribute(g, store, sp, cfg, v, p, clusters, cp, mask)
}

/// Full encoder; returns the output of every stage (the last one is the
/// encoding). Masked input rows are zeroed first so their content is inert.
pub fn exchanger_forward_stages<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &ExchangerParams,
    v: Var,
    p: Var,
    mask: &[bool],
) -> Result<Vec<Var>> {
    if params.stages.is_empty() {
        return Err(Error::Config("encoder needs at least one stage".into()));
    }
    let mut x = g.mask_rows(v, mask)?;
    let mut outs = Vec::with_capacity(params.stages.len());
    for sp in &params.stages {
        x = stage_forward(g, store, sp, &params.config, x, p, mask)?;
        outs.push(x);
    }
    Ok(outs)
}

pub fn exchanger_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &ExchangerParams,
    v: Var,
    p: Var,
    mask: &[bool],
) -> Result<Var> {
    Ok(*exchanger_forward_stages(g, store, params, v, p, mask)?.last().unwrap())
}

/// Multiply-accumulate count of one forward pass over `t` tokens.
///
/// Only matrix products are counted. The result is affine in `t`; the
/// constant term is the cluster-side work (query/key/value projections of
/// the clusters and the update MLPs).
pub fn count_flops(cfg: &ExchangerConfig, t: u64) -> u64 {
    let (d, n, e, th) = (cfg.d as u64, cfg.n_clusters as u64, cfg.ffn_expansion as u64, cfg.token_hidden as u64);
    let pos = u64::from(cfg.position_queries);
    let dd = d * d;
    // collect
    let collect_clusters = (1 + pos) * n * dd;
    let collect_tokens = (2 + pos) * t * dd;
    let collect_attn = (1 + pos) * n * t * d + n * t * d;
    // update
    let update = 2 * th * n * d + 2 * e * n * dd;
    // distribute
    let dist_clusters = (2 + pos) * n * dd;
    let dist_tokens = (1 + pos) * t * dd + 2 * t * dd + 2 * e * t * dd;
    let dist_attn = (1 + pos) * t * n * d + t * n * d;
    cfg.stages as u64
        * (collect_clusters + collect_tokens + collect_attn + update + dist_clusters + dist_tokens + dist_attn)
}
