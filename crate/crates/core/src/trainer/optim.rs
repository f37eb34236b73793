use serde::{Deserialize, Serialize};

use crate::error::{CarlError, Result};
use crate::params::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment accumulators shaped like the online parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
pub fn optimizer_step(params: &mut ParamSet, state: &mut AdamState, grads: &ParamSet, hyper: AdamHyper, step: usize) -> Result<()> {
    if !(hyper.lr >= 0.0) {
        return Err(CarlError::Parameter(format!("learning rate {} must be non-negative", hyper.lr)));
    }
    for p in params.iter() {
        let g = grads.require(&p.name)?;
        if g.data.len() != p.data.len() {
            return Err(CarlError::Dimension {
                op: "optimizer_step",
                lhs: p.shape.clone(),
                rhs: g.shape.clone(),
            });
        }
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(CarlError::numeric(format!("gradient of `{}`", p.name), step));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for p in params.iter_mut() {
        let g = &grads.get(&p.name).expect("checked above").data;
        let m = &mut state.m.get_mut(&p.name).ok_or_else(|| missing(&p.name))?.data;
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
        }
        let v = &mut state.v.get_mut(&p.name).ok_or_else(|| missing(&p.name))?.data;
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
        }
        let m = &state.m.get(&p.name).expect("present").data;
        let v = &state.v.get(&p.name).expect("present").data;
        for ((theta, mi), vi) in p.data.iter_mut().zip(m).zip(v) {
            let update = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            *theta -= hyper.lr * update + hyper.lr * hyper.weight_decay * *theta;
        }
    }
    Ok(())
}

fn missing(name: &str) -> CarlError {
    CarlError::Contract(format!("no optimizer moments for `{name}`"))
}
