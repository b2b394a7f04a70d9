//! Temporal self-attention encoder used as the quadratic-cost reference.
//!
//! Width, heads, FFN expansion, layer count and the untied position term
//! all mirror [`ExchangerConfig`], so the two encoders are drop-in
//! comparable. Each layer is `h = V + MHSA(V, P) W_o`, `out = h + FFN(h)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::exchanger::{ExchangerConfig, MASK_BIAS};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AttentionLayerParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub u_q: ParamId,
    pub u_k: ParamId,
    pub w_o: ParamId,
    pub ffn_fc1: (ParamId, ParamId),
    pub ffn_fc2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct SelfAttentionParams {
    pub config: ExchangerConfig,
    pub layers: Vec<AttentionLayerParams>,
}

impl SelfAttentionParams {
    pub fn init<T: Scalar, R: Rng>(
        config: &ExchangerConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (d, e) = (config.d, config.ffn_expansion);
        let layers = (0..config.stages)
            .map(|i| {
                let name = |s: &str| format!("{prefix}.layer{i}.{s}");
                AttentionLayerParams {
                    w_q: store.fan_in(name("w_q"), &[d, d], rng),
                    w_k: store.fan_in(name("w_k"), &[d, d], rng),
                    w_v: store.fan_in(name("w_v"), &[d, d], rng),
                    u_q: store.fan_in(name("u_q"), &[d, d], rng),
                    u_k: store.fan_in(name("u_k"), &[d, d], rng),
                    w_o: store.fan_in(name("w_o"), &[d, d], rng),
                    ffn_fc1: (store.fan_in(name("ffn_fc1.w"), &[d, e * d], rng), store.zeros(name("ffn_fc1.b"), &[e * d])),
                    ffn_fc2: (store.fan_in(name("ffn_fc2.w"), &[e * d, d], rng), store.zeros(name("ffn_fc2.b"), &[d])),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }
}

fn param_matmul<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, w: ParamId) -> Result<Var> {
    let w = g.param(store, w);
    g.matmul(x, w)
}

fn layer_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    lp: &AttentionLayerParams,
    cfg: &ExchangerConfig,
    v: Var,
    p: Var,
    mask: &[bool],
) -> Result<Var> {
    let batch = g.shape(v)[0];
    let dh = cfg.head_dim();
    let scale = 1.0 / (2.0 * cfg.d as f64).sqrt();

    let q_c = param_matmul(g, store, v, lp.w_q)?;
    let q_c = g.scale(q_c, scale);
    let k_c = param_matmul(g, store, v, lp.w_k)?;
    let values = param_matmul(g, store, v, lp.w_v)?;
    let pos = if cfg.position_queries {
        let q = param_matmul(g, store, p, lp.u_q)?;
        let q = g.scale(q, scale);
        let k = param_matmul(g, store, p, lp.u_k)?;
        Some((g.repeat_batch(q, batch), g.repeat_batch(k, batch)))
    } else {
        None
    };
    let bias = if mask.iter().all(|&m| m) {
        None
    } else {
        let data = mask.iter().map(|&m| if m { T::zero() } else { T::of(MASK_BIAS) }).collect();
        Some(g.constant(Tensor::new(&[mask.len()], data)?))
    };

    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        // content and position products summed as one product over
        // concatenated [content | position] query and key features
        let mut qh = g.slice_last(q_c, h * dh, dh)?;
        let mut kh = g.slice_last(k_c, h * dh, dh)?;
        if let Some((q_p, k_p)) = pos {
            let qph = g.slice_last(q_p, h * dh, dh)?;
            let kph = g.slice_last(k_p, h * dh, dh)?;
            qh = g.concat(&[qh, qph])?;
            kh = g.concat(&[kh, kph])?;
        }
        let mut logits = g.bmm(qh, kh, true)?;
        if let Some(b) = bias {
            logits = g.add_bcast(logits, b)?;
        }
        let attn = g.softmax(logits);
        let vh = g.slice_last(values, h * dh, dh)?;
        heads.push(g.bmm(attn, vh, false)?);
    }
    let attended = if heads.len() == 1 { heads[0] } else { g.concat(&heads)? };
    let attended = param_matmul(g, store, attended, lp.w_o)?;
    let h = g.add(v, attended)?;

    let (w1, b1) = (g.param(store, lp.ffn_fc1.0), g.param(store, lp.ffn_fc1.1));
    let (w2, b2) = (g.param(store, lp.ffn_fc2.0), g.param(store, lp.ffn_fc2.1));
    let f = g.matmul(h, w1)?;
    let f = g.add_bcast(f, b1)?;
    let f = g.gelu(f);
    let f = g.matmul(f, w2)?;
    let f = g.add_bcast(f, b2)?;
    let out = g.add(h, f)?;
    g.mask_rows(out, mask)
}

/// Self-attention encoding of `v: [T, d]` or `[B, T, d]` with positions
/// `p: [T, d]`. Output has the same shape as `v`; masked rows are zero.
pub fn self_attention_baseline<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &SelfAttentionParams,
    v: Var,
    p: Var,
    mask: &[bool],
) -> Result<Var> {
    let cfg = &params.config;
    let shape = g.shape(v).to_vec();
    let (was_2d, t) = match *shape.as_slice() {
        [t, d] if d == cfg.d => (true, t),
        [_, t, d] if d == cfg.d => (false, t),
        _ => return Err(Error::Dimension(format!("tokens must be [T, {}] or [B, T, {}], got {shape:?}", cfg.d, cfg.d))),
    };
    if g.shape(p) != [t, cfg.d] || mask.len() != t {
        return Err(Error::dims("self_attention_baseline", &shape, g.shape(p)));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Data("self-attention: every time step is masked".into()));
    }
    let mut x = if was_2d { g.reshape(v, &[1, t, cfg.d])? } else { v };
    x = g.mask_rows(x, mask)?;
    for lp in &params.layers {
        x = layer_forward(g, store, lp, cfg, x, p, mask)?;
    }
    if was_2d {
        x = g.reshape(x, &[t, cfg.d])?;
    }
    Ok(x)
}

/// Multiply-accumulate count of [`self_attention_baseline`] over `t`
/// tokens; quadratic in `t`.
pub fn baseline_flops(cfg: &ExchangerConfig, t: u64) -> u64 {
    let (d, e) = (cfg.d as u64, cfg.ffn_expansion as u64);
    let pos = u64::from(cfg.position_queries);
    let projections = (3 + 2 * pos) * t * d * d + t * d * d;
    let attention = (1 + pos) * t * t * d + t * t * d;
    let ffn = 2 * e * t * d * d;
    cfg.stages as u64 * (projections + attention + ffn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_attends_to_itself() {
        let cfg = ExchangerConfig { d: 4, heads: 2, stages: 1, ffn_expansion: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let params = SelfAttentionParams::init(&cfg, &mut store, "sa", &mut rng).unwrap();
        let lp = &params.layers[0];
        let v = Tensor::new(&[1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let p = g.constant(Tensor::new(&[1, 4], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let out = self_attention_baseline(&mut g, &store, &params, vv, p, &[true]).unwrap();

        // with one key the attention weight is 1: h = v + (v Wv) Wo
        let mm = |x: &[f64], w: &Tensor<f64>| -> Vec<f64> {
            let n = w.shape()[1];
            (0..n).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w.data()[i * n + j]).sum()).collect()
        };
        let vw = mm(v.data(), store.get(lp.w_v));
        let o = mm(&vw, store.get(lp.w_o));
        let h: Vec<f64> = v.data().iter().zip(&o).map(|(a, b)| a + b).collect();
        let f1: Vec<f64> = mm(&h, store.get(lp.ffn_fc1.0))
            .into_iter()
            .map(|x| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt())))
            .collect();
        let f2 = mm(&f1, store.get(lp.ffn_fc2.0));
        for j in 0..4 {
            assert!((g.value(out).data()[j] - (h[j] + f2[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn flops_are_quadratic() {
        let cfg = ExchangerConfig::default();
        let f = |t| baseline_flops(&cfg, t) as i128;
        // second difference is constant for a quadratic
        let second = |t: i128| f((t + 2) as u64) - 2 * f((t + 1) as u64) + f(t as u64);
        assert_eq!(second(10), second(500));
        assert!(second(10) > 0);
    }
}
