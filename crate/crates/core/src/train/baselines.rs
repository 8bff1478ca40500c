//! Non-learned reference reconstructions.

use crate::error::{Error, Result};
use crate::mri::EncodingOperator;
use crate::tensor::ComplexTensor;
use crate::unrolled::conjugate_gradient;

pub const CG_SENSE_LAMBDA: f64 = 1e-3;
pub const CG_SENSE_ITERS: usize = 30;

/// `A^H y`.
pub fn zero_filled(op: &EncodingOperator, y: &ComplexTensor) -> Result<ComplexTensor> {
    op.adjoint(y)
}

/// Solves `(A^H A + λ I) x = A^H y` by CG from zero; stops early only on an
/// exactly zero residual.
pub fn cg_sense(op: &EncodingOperator, y: &ComplexTensor, lambda: f64, iters: usize) -> Result<ComplexTensor> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let rhs = op.adjoint(y)?;
    let x0 = ComplexTensor::zeros(rhs.shape())?;
    let report = conjugate_gradient(|x| op.normal(x, lambda), &rhs, x0, iters, 0.0)?;
    Ok(report.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::{make_phantom, make_poisson_disk_mask, make_sensitivities, PhantomKind, SamplingMask};
    use crate::train::metrics::psnr;

    fn full_case() -> (EncodingOperator, ComplexTensor, ComplexTensor) {
        let x = make_phantom(&[16, 16], PhantomKind::Static2d, 3).unwrap();
        let sens = make_sensitivities(&[16, 16], 3, 4).unwrap();
        let op = EncodingOperator::new(&SamplingMask::full(&[16, 16]).unwrap(), &sens).unwrap();
        let y = op.forward(&x).unwrap();
        (op, x, y)
    }

    fn rel(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
        a.sub(b).unwrap().norm2() / b.norm2()
    }

    #[test]
    fn full_mask_recovers_ground_truth() {
        let (op, x, y) = full_case();
        assert!(rel(&zero_filled(&op, &y).unwrap(), &x) < 1e-12);
        assert!(rel(&cg_sense(&op, &y, 0.0, CG_SENSE_ITERS).unwrap(), &x) < 1e-10);
        let shrunk = cg_sense(&op, &y, CG_SENSE_LAMBDA, CG_SENSE_ITERS).unwrap();
        assert!(shrunk.sub(&x).unwrap().norm2() <= CG_SENSE_LAMBDA * x.norm2());
    }

    #[test]
    fn cg_sense_beats_zero_filled_when_undersampled() {
        for seed in 0..4 {
            let x = make_phantom(&[32, 32], PhantomKind::Static2d, seed).unwrap();
            let sens = make_sensitivities(&[32, 32], 4, seed + 10).unwrap();
            let mask = make_poisson_disk_mask(&[32, 32], 4.0, &[6, 6], seed + 20).unwrap();
            let op = EncodingOperator::new(&mask, &sens).unwrap();
            let y = op.forward(&x).unwrap();
            let zf = psnr(&zero_filled(&op, &y).unwrap(), &x).unwrap();
            let cg = psnr(&cg_sense(&op, &y, CG_SENSE_LAMBDA, CG_SENSE_ITERS).unwrap(), &x).unwrap();
            assert!(cg >= zf, "seed {seed}: cg {cg} < zf {zf}");
        }
    }

    #[test]
    fn rejects_negative_lambda() {
        let (op, _, y) = full_case();
        assert!(cg_sense(&op, &y, -1.0, 5).is_err());
    }
}
