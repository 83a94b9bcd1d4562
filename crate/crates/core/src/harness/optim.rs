//! LAMB and AdamW with lazily allocated moment buffers, plus the learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const TRUST_RATIO_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lamb,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Lamb,
            lr: 2e-3,
            betas: [0.9, 0.98],
            eps: 1e-6,
            weight_decay: 0.05,
        }
    }
}

impl OptimizerConfig {
    pub fn adamw() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            lr: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [b1, b2] = self.betas;
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    /// Keyed by parameter index; only parameters that have received a gradient.
    pub moments: BTreeMap<usize, Moments<T>>,
}

impl<T> Default for OptimizerState<T> {
    fn default() -> Self {
        OptimizerState {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

fn norm(x: impl Iterator<Item = f64>) -> f64 {
    x.map(|v| v * v).sum::<f64>().sqrt()
}

/// One update of every parameter in `grads` at learning rate `lr`.
///
/// Gradients are checked for finiteness before anything is modified.
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut OptimizerState<T>,
    hyper: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    for (id, g) in grads {
        let p = params.get(*id);
        if g.shape() != p.value.shape() {
            return Err(Error::dim("optimizer_step", format!("{}: grad {:?} vs param {:?}", p.name, g.shape(), p.value.shape())));
        }
        if let Some(i) = g.data().iter().position(|v| !v.as_f64().is_finite()) {
            return Err(Error::numeric(
                "optimizer_step",
                format!("gradient of {} has non-finite element {i} at step {}", p.name, state.step + 1),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let [b1, b2] = hyper.betas;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (id, g) in grads {
        let param = params.get_mut(*id);
        let wd = if param.decay { hyper.weight_decay } else { 0.0 };
        let n = g.len();
        let mo = state.moments.entry(id.index()).or_insert_with(|| Moments {
            m: Tensor::zeros(g.shape()),
            v: Tensor::zeros(g.shape()),
        });
        let mut update = Vec::with_capacity(n);
        let w = param.value.data_mut();
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for i in 0..n {
            let gi = g.data()[i].as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = T::from_f64(mi);
            v[i] = T::from_f64(vi);
            let dir = (mi / bc1) / ((vi / bc2).sqrt() + hyper.eps);
            update.push(dir + wd * w[i].as_f64());
        }
        let scale = match hyper.kind {
            OptimizerKind::Adamw => lr,
            OptimizerKind::Lamb => {
                let wn = norm(w.iter().map(|x| x.as_f64()));
                let un = norm(update.iter().copied());
                let ratio = if wn > 0.0 && un > 0.0 { (wn / un).clamp(0.0, TRUST_RATIO_MAX) } else { 1.0 };
                lr * ratio
            }
        };
        for (wi, u) in w.iter_mut().zip(&update) {
            *wi = T::from_f64(wi.as_f64() - scale * u);
        }
    }
    Ok(())
}

/// Linear warmup followed by cosine decay to `min_lr_ratio * lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup_steps: 100,
            min_lr_ratio: 0.05,
        }
    }
}

impl ScheduleConfig {
    /// Learning rate for 0-based `step` of `total`.
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = base * self.min_lr_ratio;
        floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
