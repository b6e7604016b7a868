use serde::{Deserialize, Serialize};

use super::stack::LayerStack;
use crate::error::{Error, Result};

/// Learning rate `lr`, momentum and coupled L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} not in [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// `v <- mu v - lr (g + lambda w); w <- w + v`, elementwise.
pub fn sgd_update(w: &mut [f64], g: &[f64], v: &mut [f64], hp: &SgdParams) -> Result<()> {
    if w.len() != g.len() || w.len() != v.len() {
        return Err(Error::Shape(format!(
            "sgd update over {} params, {} grads, {} velocities",
            w.len(),
            g.len(),
            v.len()
        )));
    }
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = hp.momentum * *v - hp.lr * (g + hp.weight_decay * *w);
        *w += *v;
    }
    Ok(())
}

/// Momentum buffers mirroring a [`LayerStack`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub params: SgdParams,
    pub velocity: LayerStack,
}

impl OptimizerState {
    pub fn new(params: SgdParams, model: &LayerStack) -> Result<Self> {
        params.validate()?;
        Ok(OptimizerState {
            params,
            velocity: model.zeros_like(),
        })
    }

    /// Updates every tensor whose name passes `trainable`; the rest are left
    /// untouched, velocities included.
    pub fn step(
        &mut self,
        model: &mut LayerStack,
        grads: &LayerStack,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let hp = self.params;
        let grad_views = grads.tensors();
        let mut params = model.tensors_mut();
        let mut vels = self.velocity.tensors_mut();
        if params.len() != grad_views.len() || params.len() != vels.len() {
            return Err(Error::Shape("gradient stack does not match the model".into()));
        }
        for (((name, w), (gname, _, g)), (_, v)) in
            params.iter_mut().zip(&grad_views).zip(vels.iter_mut())
        {
            if name != gname {
                return Err(Error::Shape(format!("tensor {name} paired with {gname}")));
            }
            if trainable(name) {
                sgd_update(w, g, v, &hp)?;
            }
        }
        Ok(())
    }
}
