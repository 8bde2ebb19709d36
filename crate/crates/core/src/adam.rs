//! Bias-corrected ADAM.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{read_arrays, write_arrays, NamedArray};
use crate::tensor::Tensor;

pub const ADAM_MAGIC: &[u8; 4] = b"NDLA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.eps <= 0.0 {
            return Err(config_err!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// Moment estimates for one ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamState {
            config,
            step_count: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

impl AdamState {
    fn signature(&self) -> String {
        let sizes: Vec<String> = self.m.iter().map(|m| m.len().to_string()).collect();
        format!("adam slots={}", sizes.join(","))
    }
}

/// Writes step count and moments in the named-array container.
pub fn save_adam(state: &AdamState, path: &Path) -> Result<()> {
    let mut arrays = vec![NamedArray {
        name: "step_count".into(),
        shape: vec![1],
        data: vec![state.step_count as f64],
    }];
    for (kind, slots) in [("m", &state.m), ("v", &state.v)] {
        for (i, s) in slots.iter().enumerate() {
            arrays.push(NamedArray {
                name: format!("{kind}.{i}"),
                shape: vec![s.len()],
                data: s.clone(),
            });
        }
    }
    write_arrays(path, ADAM_MAGIC, &state.signature(), &arrays)
}

/// Reads moments saved by [`save_adam`] for the given parameter list.
pub fn load_adam(path: &Path, config: AdamConfig, params: &[Tensor]) -> Result<AdamState> {
    let mut state = AdamState::new(config, params);
    let (sig, arrays) = read_arrays(path, ADAM_MAGIC)?;
    if sig != state.signature() || arrays.len() != 1 + 2 * params.len() {
        return Err(Error::Format {
            version: 1,
            message: format!("optimizer state [{sig}] does not match [{}]", state.signature()),
        });
    }
    let mut it = arrays.into_iter();
    state.step_count = it.next().expect("length checked").data[0] as u64;
    for slot in state.m.iter_mut().chain(state.v.iter_mut()) {
        *slot = it.next().expect("length checked").data;
    }
    Ok(state)
}

/// One update of every parameter from the gradient held in its grad slot.
/// Grad slots are left untouched.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    let lr = state.config.lr;
    adam_step_lr(params, state, lr)
}

/// [`adam_step`] with the configured learning rate replaced by `lr`.
pub fn adam_step_lr(params: &mut [Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    adam_step_lrs(params, state, &vec![lr; params.len()])
}

/// [`adam_step`] with a separate learning rate for every parameter.
pub fn adam_step_lrs(params: &mut [Tensor], state: &mut AdamState, lrs: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || params.len() != lrs.len() {
        return Err(shape_err!(
            "adam: {} params, {} moment slots, {} learning rates",
            params.len(),
            state.m.len(),
            lrs.len()
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::Usage(format!("adam: parameter {i} has no gradient")));
        }
        if state.m[i].len() != p.numel() {
            return Err(shape_err!("adam: parameter {i} size mismatch"));
        }
    }
    state.step_count += 1;
    let AdamConfig {
        beta1,
        beta2,
        eps,
        ..
    } = state.config;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let lr = lrs[i];
        let g = p.take_grad().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(&g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
        p.accumulate_grad_owned(g);
    }
    Ok(())
}
