use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of applied steps.
    pub t: u64,
    pub m: IndexMap<String, Tensor<f32>>,
    pub v: IndexMap<String, Tensor<f32>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update over every gradient in `grads`.
///
/// The step is refused (nothing is modified) if any gradient is non-finite.
pub fn adam_step(
    params: &mut Parameters,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Config(format!("gradient shape {:?} vs parameter {:?} for {name}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name} contains NaN or Inf; step aborted")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let g = gv as f64;
            let m_new = b1 * *mv as f64 + (1.0 - b1) * g;
            let v_new = b2 * *vv as f64 + (1.0 - b2) * g * g;
            *mv = m_new as f32;
            *vv = v_new as f32;
            let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + state.eps);
            *pv = (*pv as f64 - update) as f32;
        }
    }
    Ok(())
}
