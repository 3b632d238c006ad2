//! Adam with linear warmup, and EMA of weights.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ParamSet, VelocityModel};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Per-parameter gradients keyed like a [`ParamSet`].
pub type ParamGrads = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    base_lr: f64,
    warmup: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, base_lr: f64, warmup: u64) -> Result<Self> {
        if !(base_lr.is_finite() && base_lr > 0.0) {
            return Err(Error::Config(format!("learning rate {base_lr} must be positive")));
        }
        let zeros: BTreeMap<String, Tensor> =
            params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        Ok(Self { step: 0, first: zeros.clone(), second: zeros, base_lr, warmup })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate applied at (1-based) optimizer step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            self.base_lr
        } else {
            self.base_lr * (step.min(self.warmup) as f64 / self.warmup as f64)
        }
    }

    /// One bias-corrected Adam update of `params`. Returns the learning rate used.
    pub fn adam_step(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<f64> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Dimension(format!("missing gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {name} is {} at element {i}",
                    g.data()[i]
                )));
            }
        }
        self.step += 1;
        let lr = self.lr_at(self.step);
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let g = &grads[&name];
            let m = self.first.get_mut(&name).expect("moment layout mirrors params");
            let v = self.second.get_mut(&name).expect("moment layout mirrors params");
            let p = params.get_mut(&name).expect("name from params");
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
        Ok(lr)
    }
}

impl VelocityModel {
    /// Adam update of the live parameters.
    pub fn apply_adam(&mut self, opt: &mut OptimizerState, grads: &ParamGrads) -> Result<f64> {
        let params = self.params_mut("optimizer step")?;
        opt.adam_step(params, grads)
    }
}

/// `ema ← ratio·ema + (1−ratio)·params`.
pub fn ema_update(model: &mut VelocityModel, ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("EMA ratio {ratio} outside [0, 1)")));
    }
    let (ema, params) = model.ema_and_params_mut("EMA update")?;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let p = params.get(&name).expect("same layout");
        let e = ema.get_mut(&name).expect("same layout");
        for (ev, pv) in e.data_mut().iter_mut().zip(p.data()) {
            *ev = ratio * *ev + (1.0 - ratio) * pv;
        }
    }
    Ok(())
}
