//! Gradient engines over the unrolled network.
//!
//! [`backprop_standard`] records every unroll on one tape and backpropagates
//! once. [`backprop_mel`] runs an unrecorded forward pass, then walks the
//! unrolls in reverse: it inverts the DC layer and the regularizer to recover
//! each unroll's input, rebuilds that unroll's graph, backpropagates through
//! it and disposes it before moving on.

mod report;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::mri::EncodingOperator;
use crate::tensor::{AnyTensor, ComplexTensor, LedgerHandle, RealTensor};
use crate::unrolled::{
    modl_forward, modl_forward_iterates, modl_forward_recorded, CaseContext, NetVars, ParamGrads, RegularizerVars,
    UnrolledNetParams, DEFAULT_INVERT_MAX_ITER, DEFAULT_INVERT_TOL,
};

pub use report::{engine_report, parse_engine_report, write_engine_report, BenchRow, REPORT_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Standard,
    Mel,
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Engine::Standard => "standard",
            Engine::Mel => "mel",
        })
    }
}

impl std::str::FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Engine::Standard),
            "mel" => Ok(Engine::Mel),
            other => Err(Error::InvalidParameter(format!(
                "unknown engine {other:?} (expected standard or mel)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    /// Relative residual at which the regularizer inversion stops.
    pub invert_tol: f64,
    pub invert_max_iter: usize,
    /// Also run a stored forward pass and compare every recomputed iterate.
    pub debug_recompute: bool,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            invert_tol: DEFAULT_INVERT_TOL,
            invert_max_iter: DEFAULT_INVERT_MAX_ITER,
            debug_recompute: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradientResult {
    pub engine: Engine,
    pub grads: ParamGrads,
    pub loss: f64,
    /// Peak bytes retained by tapes during the evaluation.
    pub peak_tape_bytes: usize,
    pub wall_time: f64,
    /// Network output `x_N`.
    pub output: ComplexTensor,
    /// Fixed-point updates per unroll (MEL only), indexed by unroll.
    pub inversion_iterations: Vec<usize>,
    /// `‖recomputed x_n − stored x_n‖ / ‖x_n‖` for `n = 0..N` (debug mode only).
    pub recompute_errors: Option<Vec<f64>>,
}

impl GradientResult {
    pub fn max_recompute_error(&self) -> Option<f64> {
        self.recompute_errors
            .as_ref()
            .map(|e| e.iter().copied().fold(0.0, f64::max))
    }
}

fn check_target(op: &EncodingOperator, target: &ComplexTensor) -> Result<()> {
    if target.shape() != op.image_shape() {
        return Err(Error::shape(op.image_shape(), target.shape()));
    }
    Ok(())
}

fn unit_seed() -> Result<AnyTensor> {
    Ok(RealTensor::from_vec(&[1], vec![1.0])?.into())
}

/// Full-graph backpropagation of the per-pixel l1 loss.
pub fn backprop_standard(
    params: &UnrolledNetParams,
    op: &EncodingOperator,
    y: &ComplexTensor,
    target: &ComplexTensor,
) -> Result<GradientResult> {
    check_target(op, target)?;
    let start = Instant::now();
    let ledger = LedgerHandle::default();
    let ctx = CaseContext::new(params, op, y)?;
    let mut tape = Tape::new(ledger.clone());
    let vars = NetVars::register(&mut tape, params)?;
    let x = modl_forward_recorded(&mut tape, &vars, params, &ctx)?;
    let t = tape.leaf(target.clone())?;
    let loss = tape.l1_loss(&x, &t)?;
    let mut g = tape.backward(&loss, unit_seed()?, &vars.leaves())?;
    let grads = vars.collect(&mut g)?;
    let loss_value = loss.real()?.data()[0];
    let output = x.complex()?.clone();
    tape.dispose();
    Ok(GradientResult {
        engine: Engine::Standard,
        grads,
        loss: loss_value,
        peak_tape_bytes: ledger.peak_bytes(),
        wall_time: start.elapsed().as_secs_f64(),
        output,
        inversion_iterations: Vec::new(),
        recompute_errors: None,
    })
}

/// Memory-efficient backpropagation by layer inversion.
pub fn backprop_mel(
    params: &UnrolledNetParams,
    op: &EncodingOperator,
    y: &ComplexTensor,
    target: &ComplexTensor,
    cfg: &MelConfig,
) -> Result<GradientResult> {
    check_target(op, target)?;
    let start = Instant::now();
    let ledger = LedgerHandle::default();
    let ctx = CaseContext::new(params, op, y)?;
    let n_unrolls = params.n_unrolls();

    let stored = if cfg.debug_recompute {
        Some(modl_forward_iterates(params, op, y)?)
    } else {
        None
    };
    let x_final = match &stored {
        Some(xs) => xs[n_unrolls].clone(),
        None => modl_forward(params, op, y)?,
    };

    // Loss and its gradient at x_N on a throwaway tape.
    let (loss_value, mut g_x) = {
        let mut tape = Tape::new(ledger.clone());
        let xv = tape.leaf(x_final.clone())?;
        let tv = tape.leaf(target.clone())?;
        let loss = tape.l1_loss(&xv, &tv)?;
        let mut g = tape.backward(&loss, unit_seed()?, &[&xv])?;
        let value = loss.real()?.data()[0];
        let gx = g.take(&xv).ok_or(Error::NodeNotOnTape(xv.id()))?.into_complex()?;
        (value, gx)
    };

    let mut grads = ParamGrads::zeros_like(params)?;
    let mut iterations = vec![0; n_unrolls];
    let mut recompute_errors = stored.as_ref().map(|_| vec![0.0; n_unrolls + 1]);
    let mut x_next = x_final.clone();
    for n in (0..n_unrolls).rev() {
        let reg = params.reg(n);
        let z = ctx.dc.invert(&x_next)?;
        let inv = reg
            .invert(&z, cfg.invert_tol, cfg.invert_max_iter)
            .map_err(|e| match e {
                Error::FixedPointDiverged {
                    residual, iterations, ..
                } => Error::FixedPointDiverged {
                    unroll: n,
                    residual,
                    iterations,
                },
                other => other,
            })?;
        iterations[n] = inv.iterations;
        let x_n = inv.x;
        if let (Some(errs), Some(xs)) = (recompute_errors.as_mut(), stored.as_ref()) {
            errs[n] = relative_error(&x_n, &xs[n]);
        }

        // The DC node's VJP needs no saved state, so apply it directly and
        // rebuild only the regularizer's graph.
        let g_z = ctx.dc.vjp(&g_x)?;
        let mut tape = Tape::new(ledger.clone());
        let vars = RegularizerVars::register(&mut tape, reg)?;
        let xv = tape.leaf(x_n.clone())?;
        let zv = reg.forward_recorded(&mut tape, &vars, &xv)?;
        let mut leaves = vars.leaves();
        leaves.push(&xv);
        let mut g = tape.backward(&zv, AnyTensor::Complex(g_z), &leaves)?;
        for (slot, leaf) in grads.regs[params.reg_index(n)].iter_mut().zip(vars.leaves()) {
            let gw = g.take(leaf).ok_or(Error::NodeNotOnTape(leaf.id()))?.into_real()?;
            slot.add_assign(&gw)?;
        }
        g_x = g.take(&xv).ok_or(Error::NodeNotOnTape(xv.id()))?.into_complex()?;
        tape.dispose();
        x_next = x_n;
    }

    Ok(GradientResult {
        engine: Engine::Mel,
        grads,
        loss: loss_value,
        peak_tape_bytes: ledger.peak_bytes(),
        wall_time: start.elapsed().as_secs_f64(),
        output: x_final,
        inversion_iterations: iterations,
        recompute_errors,
    })
}

/// Dispatches to the selected engine.
pub fn compute_gradients(
    engine: Engine,
    params: &UnrolledNetParams,
    op: &EncodingOperator,
    y: &ComplexTensor,
    target: &ComplexTensor,
    cfg: &MelConfig,
) -> Result<GradientResult> {
    match engine {
        Engine::Standard => backprop_standard(params, op, y, target),
        Engine::Mel => backprop_mel(params, op, y, target, cfg),
    }
}

fn relative_error(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
    let d = a.sub(b).map(|d| d.norm2()).unwrap_or(f64::INFINITY);
    let n = b.norm2();
    if n > 0.0 {
        d / n
    } else {
        d
    }
}
