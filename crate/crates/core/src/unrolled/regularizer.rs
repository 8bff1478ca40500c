//! Invertible residual CNN `R_w(x) = x + c·G(x)`.
//!
//! `G` is a stack of same-padded convolutions with ReLU between them, applied
//! to the two-channel real view of a complex image. When `c·Lip(G) < 1` the
//! layer is invertible by fixed-point iteration.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{channels_to_complex, complex_to_channels, conv_nd, ComplexTensor, RealTensor};

/// Projection fires when the Lipschitz bound reaches this value...
pub const PROJECTION_TRIGGER: f64 = 0.95;
/// ...and rescales the weights so the bound equals this one.
pub const PROJECTION_TARGET: f64 = 0.9;
pub const POWER_ITERATIONS: usize = 20;

pub const DEFAULT_INVERT_TOL: f64 = 1e-10;
pub const DEFAULT_INVERT_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    /// Conv layers; 3 at desk scale, where the product norm bound of deeper
    /// stacks leaves little usable gain after projection.
    pub layers: usize,
    pub channels: usize,
    /// Odd kernel extent, used along every spatial axis.
    pub kernel: usize,
    /// 2 for `[H, W]` images, 3 for `[T, H, W]` or `[D, H, W]`.
    pub spatial_rank: usize,
    /// Contraction coefficient on the residual branch.
    pub c: f64,
    /// Multiplier on the He-initialized last layer.
    pub last_layer_scale: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            layers: 3,
            channels: 16,
            kernel: 3,
            spatial_rank: 2,
            c: 0.5,
            last_layer_scale: 0.1,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.layers < 2 {
            return bad("regularizer needs at least 2 layers");
        }
        if self.channels == 0 {
            return bad("channels must be >= 1");
        }
        if self.kernel % 2 == 0 {
            return Err(Error::EvenKernel(vec![self.kernel]));
        }
        if !(2..=3).contains(&self.spatial_rank) {
            return bad("spatial_rank must be 2 or 3");
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return bad("contraction coefficient c must lie in (0, 1)");
        }
        Ok(())
    }

    /// `(c_out, c_in)` of layer `l`.
    pub fn layer_channels(&self, l: usize) -> (usize, usize) {
        let c_in = if l == 0 { 2 } else { self.channels };
        let c_out = if l + 1 == self.layers { 2 } else { self.channels };
        (c_out, c_in)
    }

    pub fn weight_shape(&self, l: usize) -> Vec<usize> {
        let (co, ci) = self.layer_channels(l);
        let mut s = vec![co, ci];
        s.extend(std::iter::repeat_n(self.kernel, self.spatial_rank));
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: RealTensor,
    pub bias: RealTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerParams {
    pub config: RegularizerConfig,
    pub layers: Vec<ConvLayer>,
}

#[derive(Debug, Clone)]
pub struct InversionReport {
    pub x: ComplexTensor,
    /// Number of fixed-point updates applied to `x_0 = z`.
    pub iterations: usize,
    /// `‖x_k + c·G(x_k) − z‖ / ‖z‖` for `k = 0..iterations`.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionOutcome {
    pub bound_before: f64,
    pub bound_after: f64,
    pub scale: f64,
}

impl RegularizerParams {
    pub fn zeros(config: RegularizerConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|l| {
                Ok(ConvLayer {
                    weight: RealTensor::zeros(&config.weight_shape(l))?,
                    bias: RealTensor::zeros(&[config.layer_channels(l).0])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(RegularizerParams { config, layers })
    }

    /// He-normal weights, zero biases, last layer scaled by
    /// `config.last_layer_scale`, then projected.
    pub fn random(config: RegularizerConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = p.layers.len();
        for (l, layer) in p.layers.iter_mut().enumerate() {
            let shape = layer.weight.shape().to_vec();
            let fan_in: usize = shape[1..].iter().product();
            let mut std = (2.0 / fan_in as f64).sqrt();
            if l + 1 == n {
                std *= config.last_layer_scale;
            }
            let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            for v in layer.weight.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        p.project_in_place();
        Ok(p)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in canonical order `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<&RealTensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut RealTensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn check_image(&self, x: &ComplexTensor) -> Result<()> {
        if x.rank() != self.config.spatial_rank {
            return Err(Error::InvalidParameter(format!(
                "regularizer expects rank-{} images, got shape {:?}",
                self.config.spatial_rank,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Residual branch `G(x)`.
    pub fn residual_branch(&self, x: &ComplexTensor) -> Result<ComplexTensor> {
        self.check_image(x)?;
        let mut h = complex_to_channels(x)?;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = conv_nd(&h, &layer.weight, &layer.bias)?;
            if l < last {
                h = h.relu();
            }
        }
        channels_to_complex(&h)
    }

    /// `z = x + c·G(x)`.
    pub fn forward(&self, x: &ComplexTensor) -> Result<ComplexTensor> {
        let g = self.residual_branch(x)?;
        x.add(&g.scale(self.config.c))
    }

    /// Same arithmetic as [`forward`](Self::forward), recorded on `tape`.
    pub fn forward_recorded(&self, tape: &mut Tape, vars: &RegularizerVars, x: &Var) -> Result<Var> {
        self.check_image(x.complex()?)?;
        let mut h = tape.complex_to_channels(x)?;
        let last = vars.weights.len() - 1;
        for l in 0..vars.weights.len() {
            h = tape.conv(&h, &vars.weights[l], &vars.biases[l])?;
            if l < last {
                h = tape.relu(&h)?;
            }
        }
        let g = tape.channels_to_complex(&h)?;
        let cg = tape.scale(&g, self.config.c)?;
        tape.add(x, &cg)
    }

    /// Solves `x + c·G(x) = z` by `x_{k+1} = z − c·G(x_k)` from `x_0 = z`,
    /// stopping once `‖x_{k+1} − x_k‖ ≤ tol·‖z‖`. Since that step equals the
    /// residual of `x_k`, the returned `x_{k+1}` meets the tolerance with a
    /// further factor of the contraction to spare.
    pub fn invert(&self, z: &ComplexTensor, tol: f64, max_iter: usize) -> Result<InversionReport> {
        let denom = match z.norm2() {
            n if n > 0.0 => n,
            _ => 1.0,
        };
        let mut x = z.clone();
        let mut residuals = Vec::new();
        for k in 1..=max_iter {
            let next = z.sub(&self.residual_branch(&x)?.scale(self.config.c))?;
            let step = next.sub(&x)?.norm2() / denom;
            residuals.push(step);
            x = next;
            if step <= tol {
                return Ok(InversionReport {
                    x,
                    iterations: k,
                    residuals,
                });
            }
            if !step.is_finite() {
                break;
            }
        }
        Err(Error::FixedPointDiverged {
            unroll: 0,
            residual: residuals.last().copied().unwrap_or(f64::NAN),
            iterations: residuals.len(),
        })
    }

    /// Operator-norm estimate of every convolution, from power iteration on
    /// the circular-padding operator over a `probe`-point grid per axis.
    /// The circular operator is block-diagonal in the Fourier domain, so the
    /// iteration runs on each `c_out × c_in` frequency block.
    pub fn layer_norms(&self, probe: usize) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| circular_conv_norm(&l.weight, probe, POWER_ITERATIONS))
            .collect()
    }

    /// `c · Π σ_ℓ`, an upper bound on the Lipschitz constant of `c·G`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.config.c * self.layer_norms(self.default_probe()).iter().product::<f64>()
    }

    pub fn default_probe(&self) -> usize {
        if self.config.spatial_rank == 2 {
            16
        } else {
            8
        }
    }

    /// Returns projected weights; see [`project_in_place`](Self::project_in_place).
    pub fn project_weights(&self) -> RegularizerParams {
        let mut p = self.clone();
        p.project_in_place();
        p
    }

    /// If the bound is at least [`PROJECTION_TRIGGER`], rescales every conv
    /// weight by the same factor so the bound becomes [`PROJECTION_TARGET`].
    pub fn project_in_place(&mut self) -> ProjectionOutcome {
        let before = self.lipschitz_bound();
        if before < PROJECTION_TRIGGER {
            return ProjectionOutcome {
                bound_before: before,
                bound_after: before,
                scale: 1.0,
            };
        }
        let s = (PROJECTION_TARGET / before).powf(1.0 / self.layers.len() as f64);
        for l in &mut self.layers {
            l.weight.scale_assign(s);
        }
        ProjectionOutcome {
            bound_before: before,
            bound_after: self.lipschitz_bound(),
            scale: s,
        }
    }
}

/// Leaf variables for one regularizer's parameters on a tape.
#[derive(Debug, Clone)]
pub struct RegularizerVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl RegularizerVars {
    pub fn register(tape: &mut Tape, params: &RegularizerParams) -> Result<Self> {
        let mut weights = Vec::with_capacity(params.layers.len());
        let mut biases = Vec::with_capacity(params.layers.len());
        for l in &params.layers {
            weights.push(tape.leaf(l.weight.clone())?);
            biases.push(tape.leaf(l.bias.clone())?);
        }
        Ok(RegularizerVars { weights, biases })
    }

    /// Leaves in the canonical `w0, b0, w1, b1, ...` order.
    pub fn leaves(&self) -> Vec<&Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

/// Largest singular value of circular cross-correlation with `w` on a grid
/// of `probe` points per spatial axis (`probe` is clamped to 1 along axes
/// whose kernel extent is 1).
pub fn circular_conv_norm(w: &RealTensor, probe: usize, iterations: usize) -> f64 {
    let shape = w.shape();
    let (c_out, c_in) = (shape[0], shape[1]);
    let kdims = &shape[2..];
    let taps: usize = kdims.iter().product();
    let grid: Vec<usize> = kdims.iter().map(|&k| if k == 1 { 1 } else { probe.max(k) }).collect();
    let n_freq: usize = grid.iter().product();
    // Tap offsets relative to the kernel center.
    let offsets: Vec<Vec<f64>> = (0..taps)
        .map(|t| {
            let mut rem = t;
            let mut off = vec![0.0; kdims.len()];
            for a in (0..kdims.len()).rev() {
                off[a] = (rem % kdims[a]) as f64 - (kdims[a] / 2) as f64;
                rem /= kdims[a];
            }
            off
        })
        .collect();
    let wd = w.data();
    let mut block = vec![Complex64::new(0.0, 0.0); c_out * c_in];
    let mut v = vec![Complex64::new(0.0, 0.0); c_in];
    let mut u = vec![Complex64::new(0.0, 0.0); c_out];
    let mut best: f64 = 0.0;
    for f in 0..n_freq {
        let mut rem = f;
        let mut omega = vec![0.0; grid.len()];
        for a in (0..grid.len()).rev() {
            omega[a] = 2.0 * PI * (rem % grid[a]) as f64 / grid[a] as f64;
            rem /= grid[a];
        }
        let phases: Vec<Complex64> = offsets
            .iter()
            .map(|off| {
                let theta: f64 = off.iter().zip(&omega).map(|(o, w)| o * w).sum();
                Complex64::from_polar(1.0, theta)
            })
            .collect();
        for (idx, b) in block.iter_mut().enumerate() {
            let base = idx * taps;
            *b = (0..taps).map(|t| phases[t] * wd[base + t]).sum();
        }
        // Deterministic, generic start vector.
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = Complex64::new(1.0 + 0.37 * i as f64, 0.21 * (i % 3) as f64);
        }
        let mut sigma = 0.0;
        for _ in 0..iterations.max(1) {
            for (o, uo) in u.iter_mut().enumerate() {
                *uo = (0..c_in).map(|i| block[o * c_in + i] * v[i]).sum();
            }
            for (i, vi) in v.iter_mut().enumerate() {
                *vi = (0..c_out).map(|o| block[o * c_in + i].conj() * u[o]).sum();
            }
            let nv: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if nv == 0.0 {
                sigma = 0.0;
                break;
            }
            for vi in v.iter_mut() {
                *vi /= nv;
            }
            sigma = nv.sqrt();
        }
        if sigma > 0.0 {
            for (o, uo) in u.iter_mut().enumerate() {
                *uo = (0..c_in).map(|i| block[o * c_in + i] * v[i]).sum();
            }
            sigma = u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        }
        best = best.max(sigma);
    }
    best
}
