use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::dc::{DcConfig, DcLayer};
use super::regularizer::{ProjectionOutcome, RegularizerConfig, RegularizerParams, RegularizerVars};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mri::EncodingOperator;
use crate::tensor::{ComplexTensor, RealTensor};

/// Architecture and solver hyperparameters of the unrolled network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub regularizer: RegularizerConfig,
    pub dc: DcConfig,
    pub n_unrolls: usize,
    /// One regularizer for every unroll (MoDL); `false` gives each unroll its own.
    pub shared_weights: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            regularizer: RegularizerConfig::default(),
            dc: DcConfig::default(),
            n_unrolls: 5,
            shared_weights: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.regularizer.validate()?;
        self.dc.validate()
    }

    pub fn n_regularizers(&self) -> usize {
        if self.shared_weights {
            1
        } else {
            self.n_unrolls.max(1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledNetParams {
    pub config: NetConfig,
    pub regs: Vec<RegularizerParams>,
}

impl UnrolledNetParams {
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let regs = (0..config.n_regularizers())
            .map(|_| RegularizerParams::zeros(config.regularizer))
            .collect::<Result<_>>()?;
        Ok(UnrolledNetParams { config, regs })
    }

    pub fn random(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let regs = (0..config.n_regularizers())
            .map(|i| RegularizerParams::random(config.regularizer, seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        Ok(UnrolledNetParams { config, regs })
    }

    /// Regularizer applied at unroll `n`.
    pub fn reg(&self, n: usize) -> &RegularizerParams {
        if self.config.shared_weights {
            &self.regs[0]
        } else {
            &self.regs[n]
        }
    }

    pub fn reg_index(&self, n: usize) -> usize {
        if self.config.shared_weights {
            0
        } else {
            n
        }
    }

    pub fn n_unrolls(&self) -> usize {
        self.config.n_unrolls
    }

    pub fn mu(&self) -> f64 {
        self.config.dc.mu
    }

    pub fn n_params(&self) -> usize {
        self.regs.iter().map(RegularizerParams::n_params).sum()
    }

    /// Copy with a different unroll count. Shared weights carry over; per-unroll
    /// weights require the count to stay the same.
    pub fn with_unrolls(&self, n_unrolls: usize) -> Result<Self> {
        if !self.config.shared_weights && n_unrolls != self.config.n_unrolls {
            return Err(Error::InvalidParameter(
                "per-unroll weights cannot change the unroll count".into(),
            ));
        }
        let mut p = self.clone();
        p.config.n_unrolls = n_unrolls;
        Ok(p)
    }

    pub fn project_weights(&mut self) -> Vec<ProjectionOutcome> {
        self.regs.iter_mut().map(RegularizerParams::project_in_place).collect()
    }

    pub fn check_matches(&self, grads: &ParamGrads) -> Result<()> {
        if grads.regs.len() != self.regs.len() {
            return Err(Error::InvalidParameter("gradient/regularizer count mismatch".into()));
        }
        for (r, g) in self.regs.iter().zip(&grads.regs) {
            let ts = r.tensors();
            if ts.len() != g.len() {
                return Err(Error::InvalidParameter("gradient/parameter count mismatch".into()));
            }
            for (t, gt) in ts.iter().zip(g) {
                if t.shape() != gt.shape() {
                    return Err(Error::shape(t.shape(), gt.shape()));
                }
            }
        }
        Ok(())
    }
}

/// Gradients with the layout of [`UnrolledNetParams::regs`], each inner list
/// in the canonical `w0, b0, w1, b1, ...` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub regs: Vec<Vec<RealTensor>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &UnrolledNetParams) -> Result<Self> {
        let regs = params
            .regs
            .iter()
            .map(|r| r.tensors().iter().map(|t| RealTensor::zeros(t.shape())).collect())
            .collect::<Result<_>>()?;
        Ok(ParamGrads { regs })
    }

    pub fn iter(&self) -> impl Iterator<Item = &RealTensor> {
        self.regs.iter().flatten()
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        for (a, b) in self.regs.iter_mut().flatten().zip(other.iter()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn norm2(&self) -> f64 {
        self.iter().map(RealTensor::norm_sqr).sum::<f64>().sqrt()
    }

    /// Largest `|a_i − b_i| / max(|b_i|, floor)` over all elements, with the
    /// floor `1e-12 · max|b|` guarding near-zero entries.
    pub fn max_rel_diff(&self, reference: &ParamGrads) -> f64 {
        let scale = reference.iter().map(RealTensor::max_abs).fold(0.0, f64::max);
        let floor = (1e-12 * scale).max(f64::MIN_POSITIVE);
        self.iter()
            .zip(reference.iter())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
            .fold(0.0, f64::max)
    }
}

/// One regularizer's leaves for each distinct weight set.
#[derive(Debug, Clone)]
pub struct NetVars {
    pub regs: Vec<RegularizerVars>,
}

impl NetVars {
    pub fn register(tape: &mut Tape, params: &UnrolledNetParams) -> Result<Self> {
        let regs = params
            .regs
            .iter()
            .map(|r| RegularizerVars::register(tape, r))
            .collect::<Result<_>>()?;
        Ok(NetVars { regs })
    }

    pub fn leaves(&self) -> Vec<&Var> {
        self.regs.iter().flat_map(RegularizerVars::leaves).collect()
    }

    /// Reads gradients for every leaf out of `grads`, in [`ParamGrads`] layout.
    pub fn collect(&self, grads: &mut crate::autodiff::GradientMap) -> Result<ParamGrads> {
        let regs = self
            .regs
            .iter()
            .map(|r| {
                r.leaves()
                    .into_iter()
                    .map(|leaf| grads.take(leaf).ok_or(Error::NodeNotOnTape(leaf.id()))?.into_real())
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(ParamGrads { regs })
    }
}

/// Per-case state shared by every unroll: the DC layer and `x_0 = A^H y`.
#[derive(Debug, Clone)]
pub struct CaseContext {
    pub dc: Arc<DcLayer>,
}

impl CaseContext {
    pub fn new(params: &UnrolledNetParams, op: &EncodingOperator, y: &ComplexTensor) -> Result<Self> {
        Ok(CaseContext {
            dc: Arc::new(DcLayer::new(op, y, params.config.dc)?),
        })
    }

    pub fn x0(&self) -> &ComplexTensor {
        self.dc.aty()
    }
}

/// One unroll: `x_{n+1} = DC(R_w(x_n))`.
pub fn unroll_step(
    params: &UnrolledNetParams,
    ctx: &CaseContext,
    n: usize,
    x: &ComplexTensor,
) -> Result<ComplexTensor> {
    let z = params.reg(n).forward(x)?;
    ctx.dc.forward(&z)
}

/// Unrecorded forward pass; no activations are kept.
pub fn modl_forward(params: &UnrolledNetParams, op: &EncodingOperator, y: &ComplexTensor) -> Result<ComplexTensor> {
    let ctx = CaseContext::new(params, op, y)?;
    let mut x = ctx.x0().clone();
    for n in 0..params.n_unrolls() {
        x = unroll_step(params, &ctx, n, &x)?;
    }
    Ok(x)
}

/// Unrecorded forward pass that also returns every iterate `x_0..=x_N`.
pub fn modl_forward_iterates(
    params: &UnrolledNetParams,
    op: &EncodingOperator,
    y: &ComplexTensor,
) -> Result<Vec<ComplexTensor>> {
    let ctx = CaseContext::new(params, op, y)?;
    let mut xs = vec![ctx.x0().clone()];
    for n in 0..params.n_unrolls() {
        let next = unroll_step(params, &ctx, n, &xs[n])?;
        xs.push(next);
    }
    Ok(xs)
}

/// Records all unrolls on `tape`, starting from the leaf `x_0 = A^H y`.
pub fn modl_forward_recorded(
    tape: &mut Tape,
    vars: &NetVars,
    params: &UnrolledNetParams,
    ctx: &CaseContext,
) -> Result<Var> {
    let mut x = tape.leaf(ctx.x0().clone())?;
    for n in 0..params.n_unrolls() {
        let reg = params.reg(n);
        let z = reg.forward_recorded(tape, &vars.regs[params.reg_index(n)], &x)?;
        x = ctx.dc.forward_recorded(tape, &z)?;
    }
    Ok(x)
}
