use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::unrolled::{ParamGrads, ProjectionOutcome, UnrolledNetParams};

pub const DEFAULT_LR: f64 = 1e-3;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            lr: DEFAULT_LR,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// Moment estimates with one tensor per weight leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: ParamGrads,
    pub v: ParamGrads,
}

impl AdamState {
    pub fn new(params: &UnrolledNetParams, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0 && config.eps > 0.0)
            || !(0.0..1.0).contains(&config.beta1)
            || !(0.0..1.0).contains(&config.beta2)
        {
            return Err(Error::InvalidParameter(format!("invalid Adam config {config:?}")));
        }
        Ok(AdamState {
            config,
            t: 0,
            m: ParamGrads::zeros_like(params)?,
            v: ParamGrads::zeros_like(params)?,
        })
    }

    /// One bias-corrected Adam update followed by weight projection.
    pub fn step(&mut self, params: &mut UnrolledNetParams, grads: &ParamGrads) -> Result<Vec<ProjectionOutcome>> {
        params.check_matches(grads)?;
        params.check_matches(&self.m)?;
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (r, reg) in params.regs.iter_mut().enumerate() {
            for (k, w) in reg.tensors_mut().into_iter().enumerate() {
                let g = grads.regs[r][k].data();
                let m = self.m.regs[r][k].data_mut();
                for (mi, gi) in m.iter_mut().zip(g) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                }
                let v = self.v.regs[r][k].data_mut();
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                }
                let (m, v) = (self.m.regs[r][k].data(), self.v.regs[r][k].data());
                for ((wi, mi), vi) in w.data_mut().iter_mut().zip(m).zip(v) {
                    *wi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                }
            }
        }
        Ok(params.project_weights())
    }
}
