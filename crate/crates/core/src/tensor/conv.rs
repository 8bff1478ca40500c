//! "Same"-padded N-d convolution (cross-correlation, as in CNN frameworks)
//! over 2-D or 3-D spatial grids, with the two adjoint passes backprop needs.
//!
//! 2-D inputs are handled as 3-D with a depth of one, so every loop below
//! works on `[channels, depth, height, width]`.

use super::RealTensor;
use crate::error::{Error, Result};

/// Validated shapes of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    /// Spatial extent as (depth, height, width).
    pub spatial: [usize; 3],
    /// Kernel extent as (depth, height, width).
    pub kernel: [usize; 3],
    pub spatial_rank: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize]) -> Result<Self> {
        if x_shape.len() < 3 || x_shape.len() > 4 {
            return Err(Error::InvalidParameter(format!(
                "convolution input must be [C, spatial...] with 2 or 3 spatial axes, got {x_shape:?}"
            )));
        }
        let spatial_rank = x_shape.len() - 1;
        if w_shape.len() != spatial_rank + 2 {
            return Err(Error::InvalidParameter(format!(
                "kernel rank {} does not match input spatial rank {}",
                w_shape.len(),
                spatial_rank
            )));
        }
        let k = &w_shape[2..];
        if k.iter().any(|&e| e % 2 == 0) {
            return Err(Error::EvenKernel(k.to_vec()));
        }
        if w_shape[1] != x_shape[0] {
            return Err(Error::ChannelMismatch {
                input: x_shape[0],
                kernel: w_shape[1],
            });
        }
        let (spatial, kernel) = if spatial_rank == 2 {
            ([1, x_shape[1], x_shape[2]], [1, k[0], k[1]])
        } else {
            ([x_shape[1], x_shape[2], x_shape[3]], [k[0], k[1], k[2]])
        };
        Ok(ConvGeometry {
            c_in: x_shape[0],
            c_out: w_shape[0],
            spatial,
            kernel,
            spatial_rank,
        })
    }

    fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = vec![self.c_out];
        s.extend_from_slice(&self.spatial[3 - self.spatial_rank..]);
        s
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.c_out, self.c_in];
        s.extend_from_slice(&self.kernel[3 - self.spatial_rank..]);
        s
    }

    /// Every (kernel tap, output row) pair with a non-empty valid column
    /// range, as `(tap, out_row_offset, in_row_offset, len)` with offsets
    /// flat within one channel plane.
    fn rows(&self) -> Vec<(usize, usize, usize, usize)> {
        let [d, h, w] = self.spatial;
        let [kd, kh, kw] = self.kernel;
        let (cd, ch, cw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
        let mut rows = Vec::new();
        let mut tap = 0;
        for a in 0..kd as isize {
            for b in 0..kh as isize {
                for c in 0..kw as isize {
                    let (oz, oy, ox) = (a - cd, b - ch, c - cw);
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                    if x_lo < x_hi {
                        for z in 0..d as isize {
                            let zi = z + oz;
                            if zi < 0 || zi >= d as isize {
                                continue;
                            }
                            for y in 0..h as isize {
                                let yi = y + oy;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                let out_row = (z as usize * h + y as usize) * w + x_lo;
                                let in_row = (zi as usize * h + yi as usize) * w + (x_lo as isize + ox) as usize;
                                rows.push((tap, out_row, in_row, x_hi - x_lo));
                            }
                        }
                    }
                    tap += 1;
                }
            }
        }
        rows
    }
}

/// Output columns per register tile.
const TILE: usize = 8;

/// Zero-padded copy of `x` as `[C, D + kd − 1, H + kh − 1, W + kw − 1]`.
fn pad_input(x: &[f64], channels: usize, g: &ConvGeometry) -> (Vec<f64>, [usize; 3]) {
    let [d, h, w] = g.spatial;
    let [kd, kh, kw] = g.kernel;
    let pdims = [d + kd - 1, h + kh - 1, w + kw - 1];
    let pn = pdims.iter().product::<usize>();
    let mut out = vec![0.0; channels * pn];
    for c in 0..channels {
        for z in 0..d {
            for y in 0..h {
                let src = ((c * d + z) * h + y) * w;
                let dst = c * pn + ((z + kd / 2) * pdims[1] + y + kh / 2) * pdims[2] + kw / 2;
                out[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
    }
    (out, pdims)
}

/// `NB` output channels starting at `co0`, accumulated in registers over
/// `TILE`-wide column strips. `wp` holds weights as `[ci][tap][NB]`.
#[allow(clippy::too_many_arguments)]
fn forward_block<const NB: usize>(
    xp: &[f64],
    pdims: [usize; 3],
    g: &ConvGeometry,
    wp: &[f64],
    bias: &[f64],
    co0: usize,
    out: &mut [f64],
) {
    let [d, h, w] = g.spatial;
    let [kd, kh, kw] = g.kernel;
    let taps = kd * kh * kw;
    let n = d * h * w;
    let pn = pdims.iter().product::<usize>();
    for z in 0..d {
        for y in 0..h {
            let row = (z * h + y) * w;
            let mut x0 = 0;
            while x0 < w {
                let width = TILE.min(w - x0);
                let mut acc = [[0.0; TILE]; NB];
                for (k, a) in acc.iter_mut().enumerate() {
                    *a = [bias[co0 + k]; TILE];
                }
                for ci in 0..g.c_in {
                    let plane = &xp[ci * pn..(ci + 1) * pn];
                    let wc = &wp[ci * taps * NB..(ci + 1) * taps * NB];
                    let mut tap = 0;
                    for a in 0..kd {
                        for b in 0..kh {
                            let base = ((z + a) * pdims[1] + y + b) * pdims[2] + x0;
                            for c in 0..kw {
                                let wk = &wc[tap * NB..(tap + 1) * NB];
                                if width == TILE {
                                    let src: &[f64; TILE] = plane[base + c..base + c + TILE].try_into().unwrap();
                                    for k in 0..NB {
                                        for j in 0..TILE {
                                            acc[k][j] += wk[k] * src[j];
                                        }
                                    }
                                } else {
                                    let src = &plane[base + c..base + c + width];
                                    for k in 0..NB {
                                        for j in 0..width {
                                            acc[k][j] += wk[k] * src[j];
                                        }
                                    }
                                }
                                tap += 1;
                            }
                        }
                    }
                }
                for (k, a) in acc.iter().enumerate() {
                    let o = (co0 + k) * n + row + x0;
                    out[o..o + width].copy_from_slice(&a[..width]);
                }
                x0 += width;
            }
        }
    }
}

/// Core of the forward pass on raw slices; `w` is `[c_out, c_in, taps]`.
fn conv_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let taps = g.taps();
    let (xp, pdims) = pad_input(x, g.c_in, g);
    let mut co0 = 0;
    while co0 < g.c_out {
        let nb = match g.c_out - co0 {
            r if r >= 4 => 4,
            r if r >= 2 => 2,
            _ => 1,
        };
        let mut wp = vec![0.0; g.c_in * taps * nb];
        for k in 0..nb {
            for ci in 0..g.c_in {
                for t in 0..taps {
                    wp[(ci * taps + t) * nb + k] = w[((co0 + k) * g.c_in + ci) * taps + t];
                }
            }
        }
        match nb {
            4 => forward_block::<4>(&xp, pdims, g, &wp, bias, co0, out),
            2 => forward_block::<2>(&xp, pdims, g, &wp, bias, co0, out),
            _ => forward_block::<1>(&xp, pdims, g, &wp, bias, co0, out),
        }
        co0 += nb;
    }
}

/// `out[co] = b[co] + Σ_ci Σ_k w[co,ci,k] · x[ci, · + k − center]` with zero padding.
pub fn conv_nd(x: &RealTensor, w: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    let g = ConvGeometry::new(x.shape(), w.shape())?;
    if b.shape() != [g.c_out] {
        return Err(Error::shape(&[g.c_out], b.shape()));
    }
    let mut out = RealTensor::zeros(&g.output_shape())?;
    conv_forward(x.data(), w.data(), b.data(), &g, out.data_mut());
    Ok(out)
}

/// Adjoint of [`conv_nd`] in its input: maps an output-space gradient to the
/// input space. For odd centered kernels this is the same-padded convolution
/// with the spatially flipped, channel-transposed kernel.
pub fn conv_nd_backward_input(grad_out: &RealTensor, w: &RealTensor, x_shape: &[usize]) -> Result<RealTensor> {
    let g = ConvGeometry::new(x_shape, w.shape())?;
    if grad_out.shape() != g.output_shape().as_slice() {
        return Err(Error::shape(&g.output_shape(), grad_out.shape()));
    }
    let taps = g.taps();
    let wd = w.data();
    let mut wt = vec![0.0; wd.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for t in 0..taps {
                wt[(ci * g.c_out + co) * taps + (taps - 1 - t)] = wd[(co * g.c_in + ci) * taps + t];
            }
        }
    }
    let gt = ConvGeometry {
        c_in: g.c_out,
        c_out: g.c_in,
        ..g
    };
    let mut dx = RealTensor::zeros(x_shape)?;
    conv_forward(grad_out.data(), &wt, &vec![0.0; g.c_in], &gt, dx.data_mut());
    Ok(dx)
}

/// Gradients of `⟨grad_out, conv_nd(x, w, b)⟩` with respect to `w` and `b`.
pub fn conv_nd_backward_weight(
    grad_out: &RealTensor,
    x: &RealTensor,
    w_shape: &[usize],
) -> Result<(RealTensor, RealTensor)> {
    let g = ConvGeometry::new(x.shape(), w_shape)?;
    if grad_out.shape() != g.output_shape().as_slice() {
        return Err(Error::shape(&g.output_shape(), grad_out.shape()));
    }
    let n = g.voxels();
    let taps = g.taps();
    let rows = g.rows();
    let mut dw = RealTensor::zeros(w_shape)?;
    let mut db = RealTensor::zeros(&[g.c_out])?;
    let (gd, xd) = (grad_out.data(), x.data());
    let dwd = dw.data_mut();
    for co in 0..g.c_out {
        let gin = &gd[co * n..(co + 1) * n];
        for ci0 in (0..g.c_in).step_by(4) {
            let nb = 4.min(g.c_in - ci0);
            let xs: Vec<&[f64]> = (0..nb).map(|k| &xd[(ci0 + k) * n..(ci0 + k + 1) * n]).collect();
            for &(tap, o, i, len) in &rows {
                let src = &gin[o..o + len];
                let mut s = [0.0; 4];
                if let [x0, x1, x2, x3] = xs.as_slice() {
                    let (x0, x1, x2, x3) = (&x0[i..i + len], &x1[i..i + len], &x2[i..i + len], &x3[i..i + len]);
                    for j in 0..len {
                        let v = src[j];
                        s[0] += v * x0[j];
                        s[1] += v * x1[j];
                        s[2] += v * x2[j];
                        s[3] += v * x3[j];
                    }
                } else {
                    for (sk, xk) in s.iter_mut().zip(&xs) {
                        *sk = src.iter().zip(&xk[i..i + len]).map(|(a, b)| a * b).sum();
                    }
                }
                for (k, sk) in s[..nb].iter().enumerate() {
                    dwd[(co * g.c_in + ci0 + k) * taps + tap] += sk;
                }
            }
        }
    }
    for (co, v) in db.data_mut().iter_mut().enumerate() {
        *v = gd[co * n..(co + 1) * n].iter().sum();
    }
    Ok((dw, db))
}
