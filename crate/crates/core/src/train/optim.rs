use std::collections::BTreeMap;

use magtrack_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tfbrt::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Result of one optimizer call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was NaN or infinite; nothing changed.
    SkippedNonFinite,
}

/// Bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<StepOutcome> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    if grads.values().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::SkippedNonFinite);
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            pd[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(StepOutcome::Applied)
}

/// Global L2 norm across all gradients.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n.is_finite() && n > max_norm && max_norm > 0.0 {
        let s = max_norm / n;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    n
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without a strictly lower validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) || !(factor > 0.0 && factor < 1.0) || patience == 0 {
            return Err(Error::Config(format!(
                "scheduler needs lr > 0, factor in (0, 1) and patience > 0; got {lr}, {factor}, {patience}"
            )));
        }
        Ok(Self {
            lr,
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        })
    }

    /// Records one validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, val: f64) -> f64 {
        match self.best {
            Some(b) if !(val < b) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(val);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
