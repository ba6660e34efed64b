use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, one per parameter in store order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<(String, Vec<f32>)>,
    second: Vec<(String, Vec<f32>)>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |(n, t): (&str, &Tensor)| (n.to_string(), vec![0.0; t.len()]);
        Self {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f32]> {
        self.first.iter().find(|(n, _)| n == name).map(|(_, m)| m.as_slice())
    }
}

/// One bias-corrected Adam step over every parameter that has a gradient.
/// Validates all gradients before touching any parameter.
pub fn adam_update(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Invalid(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (name, _)) in state.first.clone().iter().enumerate() {
        let Some(g) = grads.get(name) else { continue };
        let p = params.get_mut(name)?;
        let m = &mut state.first[i].1;
        let v = &mut state.second[i].1;
        for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gv = gv as f64;
            let m_new = beta1 * *mv as f64 + (1.0 - beta1) * gv;
            let v_new = beta2 * *vv as f64 + (1.0 - beta2) * gv * gv;
            *mv = m_new as f32;
            *vv = v_new as f32;
            let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}
