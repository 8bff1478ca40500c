//! Undersampling patterns.
//!
//! Both generators follow a variable-density law in which the local sampling
//! density falls off as `(1 + r/r0)^-2`, `r` being the k-space radius
//! normalized to 1 at the edge of the grid.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::RealTensor;

/// Radius scale of the variable-density law.
pub const DENSITY_R0: f64 = 0.25;

/// Realized acceleration must land within this fraction of the target.
pub const ACCELERATION_TOLERANCE: f64 = 0.15;

/// Binary k-space sampling pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    values: Arc<RealTensor>,
    acceleration: f64,
    calib: Vec<usize>,
}

impl SamplingMask {
    /// Wraps an existing 0/1 tensor.
    pub fn from_tensor(values: RealTensor, acceleration: f64, calib: Vec<usize>) -> Result<Self> {
        if values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidParameter("mask values must be 0 or 1".into()));
        }
        Ok(SamplingMask {
            values: Arc::new(values),
            acceleration,
            calib,
        })
    }

    pub fn full(shape: &[usize]) -> Result<Self> {
        Ok(SamplingMask {
            values: Arc::new(RealTensor::full(shape, 1.0)?),
            acceleration: 1.0,
            calib: shape.to_vec(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn values(&self) -> &RealTensor {
        &self.values
    }

    pub fn values_arc(&self) -> Arc<RealTensor> {
        Arc::clone(&self.values)
    }

    /// Target acceleration the mask was generated for.
    pub fn target_acceleration(&self) -> f64 {
        self.acceleration
    }

    pub fn calib(&self) -> &[usize] {
        &self.calib
    }

    pub fn ones(&self) -> usize {
        self.values.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// `total / sampled`.
    pub fn realized_acceleration(&self) -> f64 {
        self.values.len() as f64 / self.ones().max(1) as f64
    }
}

fn check_acceleration(r: f64) -> Result<()> {
    if !(r >= 1.0) || !r.is_finite() {
        return Err(Error::InvalidParameter(format!("acceleration must be >= 1, got {r}")));
    }
    Ok(())
}

/// Normalized radius of index `i` on an axis of length `n`, 0 at the
/// centered DC sample and about 1 at the edge.
fn axis_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        (i as f64 - (n / 2) as f64) / (n as f64 / 2.0)
    }
}

fn density(r: f64) -> f64 {
    (1.0 + r / DENSITY_R0).powi(-2)
}

/// 2-D variable-density Poisson-disk mask on a `[ny, nx]` grid with a fully
/// sampled centered calibration box.
///
/// Points are visited in a seeded random order and accepted when no earlier
/// accepted point lies within `s·(1 + r/r0)` of them (radius evaluated at the
/// candidate). The scale `s` is bisected so the sampled count is the largest
/// reachable value not exceeding `total / R`.
pub fn make_poisson_disk_mask(shape: &[usize], acceleration: f64, calib: &[usize], seed: u64) -> Result<SamplingMask> {
    check_acceleration(acceleration)?;
    if shape.len() != 2 || calib.len() != 2 {
        return Err(Error::InvalidParameter(
            "Poisson-disk masks are defined on 2-D grids".into(),
        ));
    }
    let (ny, nx) = (shape[0], shape[1]);
    if acceleration == 1.0 {
        return SamplingMask::full(shape);
    }
    if calib[0] >= ny || calib[1] >= nx {
        return Err(Error::InvalidParameter(format!(
            "calibration region {calib:?} must be smaller than {shape:?}"
        )));
    }
    let total = ny * nx;
    let target = (total as f64 / acceleration).round() as usize;
    let in_calib = |y: usize, x: usize| {
        let (y0, x0) = (ny / 2 - calib[0] / 2, nx / 2 - calib[1] / 2);
        y >= y0 && y < y0 + calib[0] && x >= x0 && x < x0 + calib[1]
    };
    let calib_count = calib[0] * calib[1];
    if calib_count > target {
        return Err(Error::Infeasible(format!(
            "calibration region alone has {calib_count} samples, budget is {target}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<(usize, usize)> = (0..ny)
        .flat_map(|y| (0..nx).map(move |x| (y, x)))
        .filter(|&(y, x)| !in_calib(y, x))
        .collect();
    order.shuffle(&mut rng);
    let radius_factor: Vec<f64> = (0..total)
        .map(|i| {
            let (u, v) = (axis_coord(i / nx, ny), axis_coord(i % nx, nx));
            1.0 + (u * u + v * v).sqrt() / DENSITY_R0
        })
        .collect();

    let throw = |scale: f64| -> Vec<bool> {
        let mut taken = vec![false; total];
        for &(y, x) in &order {
            let d = scale * radius_factor[y * nx + x];
            let reach = d.ceil() as isize;
            let d2 = d * d;
            let mut free = true;
            'scan: for dy in -reach..=reach {
                let yy = y as isize + dy;
                if yy < 0 || yy >= ny as isize {
                    continue;
                }
                for dx in -reach..=reach {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= nx as isize || (dy * dy + dx * dx) as f64 >= d2 {
                        continue;
                    }
                    if taken[yy as usize * nx + xx as usize] {
                        free = false;
                        break 'scan;
                    }
                }
            }
            if free {
                taken[y * nx + x] = true;
            }
        }
        taken
    };
    let count = |taken: &[bool]| taken.iter().filter(|&&t| t).count() + calib_count;

    let budget = target;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best = throw(hi);
    while count(&best) > budget {
        lo = hi;
        hi *= 2.0;
        best = throw(hi);
        if hi > (ny.max(nx) * 4) as f64 {
            break;
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let t = throw(mid);
        if count(&t) > budget {
            lo = mid;
        } else {
            hi = mid;
            best = t;
        }
    }

    let mut values = RealTensor::zeros(shape)?;
    for (i, v) in values.data_mut().iter_mut().enumerate() {
        if best[i] || in_calib(i / nx, i % nx) {
            *v = 1.0;
        }
    }
    let mask = SamplingMask::from_tensor(values, acceleration, calib.to_vec())?;
    check_realized(&mask)?;
    Ok(mask)
}

fn check_realized(mask: &SamplingMask) -> Result<()> {
    let realized = mask.realized_acceleration();
    let target = mask.target_acceleration();
    if (realized - target).abs() > ACCELERATION_TOLERANCE * target {
        return Err(Error::Infeasible(format!(
            "realized acceleration {realized:.3} is outside ±15% of {target}"
        )));
    }
    Ok(())
}

/// Variable-density k-t mask of shape `[frames, ny, nx]`: each frame samples
/// `round(ny / R)` full readout lines along `ky`, placed at quantiles of the
/// density's CDF shifted by a per-frame golden-ratio offset so that
/// successive frames interleave.
pub fn make_kt_mask(spatial: &[usize], frames: usize, acceleration: f64, seed: u64) -> Result<SamplingMask> {
    check_acceleration(acceleration)?;
    if spatial.len() != 2 {
        return Err(Error::InvalidParameter("k-t masks need a 2-D spatial grid".into()));
    }
    if frames == 0 {
        return Err(Error::InvalidParameter("frames must be >= 1".into()));
    }
    let (ny, nx) = (spatial[0], spatial[1]);
    let shape = [frames, ny, nx];
    if acceleration == 1.0 {
        return SamplingMask::full(&shape);
    }
    let lines = (ny as f64 / acceleration).round() as usize;
    if lines == 0 {
        return Err(Error::Infeasible(format!(
            "acceleration {acceleration} leaves no lines out of {ny}"
        )));
    }
    let weights: Vec<f64> = (0..ny).map(|i| density(axis_coord(i, ny).abs())).collect();
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(ny);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start: f64 = rng.random();
    const GOLDEN: f64 = 0.618_033_988_749_894_9;

    let mut values = RealTensor::zeros(&shape)?;
    let data = values.data_mut();
    for t in 0..frames {
        let offset = (start + t as f64 * GOLDEN).fract();
        let mut chosen = vec![false; ny];
        for j in 0..lines {
            let q = (j as f64 + offset) / lines as f64;
            let ky = cdf.iter().position(|&c| c > q).unwrap_or(ny - 1);
            // Nearest free line, searching outward.
            let pick = (0..ny as isize)
                .flat_map(|d| [ky as isize + d, ky as isize - d])
                .find(|&k| k >= 0 && (k as usize) < ny && !chosen[k as usize])
                .expect("lines <= ny") as usize;
            chosen[pick] = true;
        }
        for (ky, &c) in chosen.iter().enumerate() {
            if c {
                let row = (t * ny + ky) * nx;
                data[row..row + nx].fill(1.0);
            }
        }
    }
    let mask = SamplingMask::from_tensor(values, acceleration, vec![])?;
    check_realized(&mask)?;
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_acceleration_samples_everything() {
        let m = make_poisson_disk_mask(&[16, 16], 1.0, &[4, 4], 3).unwrap();
        assert_eq!(m.ones(), 256);
        let k = make_kt_mask(&[16, 8], 3, 1.0, 3).unwrap();
        assert_eq!(k.ones(), 16 * 8 * 3);
    }

    #[test]
    fn poisson_disk_count_for_64x64_r8() {
        let m = make_poisson_disk_mask(&[64, 64], 8.0, &[8, 8], 7).unwrap();
        let ones = m.ones();
        assert!((410..=512).contains(&ones), "ones = {ones}");
        assert!((m.realized_acceleration() - 8.0).abs() <= 0.15 * 8.0);
    }

    #[test]
    fn poisson_disk_is_deterministic_and_keeps_calibration() {
        let a = make_poisson_disk_mask(&[32, 32], 4.0, &[6, 6], 11).unwrap();
        let b = make_poisson_disk_mask(&[32, 32], 4.0, &[6, 6], 11).unwrap();
        assert_eq!(a, b);
        let c = make_poisson_disk_mask(&[32, 32], 4.0, &[6, 6], 12).unwrap();
        assert_ne!(a.values(), c.values());
        for y in 13..19 {
            for x in 13..19 {
                assert_eq!(a.values().data()[y * 32 + x], 1.0);
            }
        }
    }

    #[test]
    fn poisson_disk_is_denser_at_the_center() {
        let m = make_poisson_disk_mask(&[64, 64], 6.0, &[4, 4], 5).unwrap();
        let (mut inner, mut n_inner, mut outer, mut n_outer) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..64 * 64 {
            let (u, v) = (axis_coord(i / 64, 64), axis_coord(i % 64, 64));
            let r = (u * u + v * v).sqrt();
            let s = m.values().data()[i];
            if r < 0.3 {
                inner += s;
                n_inner += 1.0;
            } else if r > 0.7 {
                outer += s;
                n_outer += 1.0;
            }
        }
        assert!(inner / n_inner > 2.0 * outer / n_outer);
    }

    #[test]
    fn infeasible_requests_fail() {
        assert!(matches!(
            make_poisson_disk_mask(&[16, 16], 8.0, &[8, 8], 1),
            Err(Error::Infeasible(_))
        ));
        assert!(make_poisson_disk_mask(&[16, 16], 0.5, &[2, 2], 1).is_err());
        assert!(make_poisson_disk_mask(&[16, 16], 2.0, &[16, 2], 1).is_err());
        assert!(matches!(make_kt_mask(&[4, 4], 2, 16.0, 1), Err(Error::Infeasible(_))));
        assert!(make_kt_mask(&[4, 4], 0, 2.0, 1).is_err());
    }

    #[test]
    fn kt_union_covers_most_lines() {
        let m = make_kt_mask(&[32, 16], 8, 4.0, 21).unwrap();
        assert!((m.realized_acceleration() - 4.0).abs() <= 0.6);
        let d = m.values().data();
        let covered = (0..32)
            .filter(|&ky| (0..8).any(|t| d[(t * 32 + ky) * 16] == 1.0))
            .count();
        assert!(covered as f64 >= 0.8 * 32.0, "covered {covered}");
        // frames differ
        let frame = |t: usize| (0..32).map(|ky| d[(t * 32 + ky) * 16]).collect::<Vec<_>>();
        assert_ne!(frame(0), frame(1));
        assert_eq!(m, make_kt_mask(&[32, 16], 8, 4.0, 21).unwrap());
    }
}
