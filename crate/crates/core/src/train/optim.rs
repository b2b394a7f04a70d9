use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p`.
///
/// A non-finite gradient aborts the step before anything is modified.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.m.len() != store.len() || grads.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer state for {} params, gradients for {}, store holds {}",
            state.m.len(),
            grads.len(),
            store.len()
        )));
    }
    if let Some(id) = grads.first_non_finite() {
        return Err(Error::Numerical(format!("non-finite gradient for `{}`", store.name(id))));
    }
    let (b1, b2) = betas;
    state.step += 1;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(id).expect("gradient per parameter");
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        for (((p, &gi), mi), vi) in store.get_mut(id).data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.f64();
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let (mh, vh) = (*mi / c1, *vi / c2);
            let pv = p.f64();
            *p = T::of(pv - lr * mh / (vh.sqrt() + eps) - lr * weight_decay * pv);
        }
    }
    Ok(())
}
