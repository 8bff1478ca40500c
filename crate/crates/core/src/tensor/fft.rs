use std::cell::RefCell;

use rustfft::{FftDirection, FftPlanner};

use super::{strides, ComplexTensor, C64};
use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Centered orthonormal DFT over `dims`: `fftshift(fft(ifftshift(x))) / sqrt(n)`.
pub fn fft_centered(x: &ComplexTensor, dims: &[usize]) -> Result<ComplexTensor> {
    transform(x, dims, FftDirection::Forward)
}

/// Inverse of [`fft_centered`]; also its adjoint.
pub fn ifft_centered(x: &ComplexTensor, dims: &[usize]) -> Result<ComplexTensor> {
    transform(x, dims, FftDirection::Inverse)
}

fn check_dims(rank: usize, dims: &[usize]) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::EmptyAxes);
    }
    for &d in dims {
        if d >= rank {
            return Err(Error::AxisOutOfRange { axis: d, rank });
        }
    }
    Ok(())
}

fn transform(x: &ComplexTensor, dims: &[usize], direction: FftDirection) -> Result<ComplexTensor> {
    check_dims(x.rank(), dims)?;
    let mut out = x.clone();
    let shape = x.shape().to_vec();
    let st = strides(&shape);
    let mut seen = [false; super::MAX_RANK];
    for &axis in dims {
        if std::mem::replace(&mut seen[axis], true) {
            continue;
        }
        transform_axis(out.data_mut(), &shape, &st, axis, direction);
    }
    Ok(out)
}

fn transform_axis(data: &mut [C64], shape: &[usize], st: &[usize], axis: usize, direction: FftDirection) {
    let n = shape[axis];
    let stride = st[axis];
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft(n, direction));
    let mut line = vec![C64::new(0.0, 0.0); n];
    let mut shifted = vec![C64::new(0.0, 0.0); n];
    let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let scale = 1.0 / (n as f64).sqrt();
    let half = n / 2;
    let outer = data.len() / (n * stride);
    for o in 0..outer {
        for i in 0..stride {
            let base = o * n * stride + i;
            for (k, v) in line.iter_mut().enumerate() {
                *v = data[base + k * stride];
            }
            // ifftshift: shifted[k] = line[(k + n/2) mod n]
            for k in 0..n {
                shifted[k] = line[(k + half) % n];
            }
            fft.process_with_scratch(&mut shifted, &mut scratch);
            // fftshift: out[k] = shifted[(k + n - n/2) mod n]
            for k in 0..n {
                data[base + k * stride] = shifted[(k + n - half) % n] * scale;
            }
        }
    }
}
