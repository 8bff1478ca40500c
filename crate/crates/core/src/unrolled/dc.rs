//! Data-consistency layer `x = (A^H A + μI)^{-1}(A^H y + μz)`, its exact
//! inverse and its implicit vector-Jacobian product.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ImplicitVjp, Tape, Var};
use crate::error::{Error, Result};
use crate::mri::EncodingOperator;
use crate::tensor::{ComplexTensor, C64};

pub const DEFAULT_MU: f64 = 1.0;
pub const DEFAULT_N_CG: usize = 10;
pub const DEFAULT_CG_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcConfig {
    pub mu: f64,
    /// CG iterations per solve.
    pub n_cg: usize,
    /// Early exit once `‖r‖ ≤ cg_tol·‖rhs‖`.
    pub cg_tol: f64,
}

impl Default for DcConfig {
    fn default() -> Self {
        DcConfig {
            mu: DEFAULT_MU,
            n_cg: DEFAULT_N_CG,
            cg_tol: DEFAULT_CG_TOL,
        }
    }
}

impl DcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidParameter(format!("mu must be > 0, got {}", self.mu)));
        }
        if self.n_cg == 0 {
            return Err(Error::InvalidParameter("n_cg must be >= 1".into()));
        }
        if !(self.cg_tol >= 0.0) {
            return Err(Error::InvalidParameter("cg_tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CgReport {
    pub x: ComplexTensor,
    pub iterations: usize,
    /// `‖b − M x_k‖` for `k = 0..=iterations`.
    pub residuals: Vec<f64>,
}

/// Conjugate gradient for a Hermitian positive-definite `apply`.
pub fn conjugate_gradient(
    apply: impl Fn(&ComplexTensor) -> Result<ComplexTensor>,
    rhs: &ComplexTensor,
    x0: ComplexTensor,
    max_iter: usize,
    tol: f64,
) -> Result<CgReport> {
    rhs.check_same_shape(&x0)?;
    let mut x = x0;
    let mut r = rhs.sub(&apply(&x)?)?;
    let mut rs = r.norm_sqr();
    let threshold = tol * rhs.norm2();
    let mut residuals = vec![rs.sqrt()];
    let mut p = r.clone();
    let mut iterations = 0;
    while iterations < max_iter && rs.sqrt() > threshold {
        let ap = apply(&p)?;
        let curvature = p.real_inner(&ap)?;
        if !(curvature > 0.0) {
            break;
        }
        let alpha = rs / curvature;
        x.axpy(C64::new(alpha, 0.0), &p)?;
        r.axpy(C64::new(-alpha, 0.0), &ap)?;
        let rs_new = r.norm_sqr();
        residuals.push(rs_new.sqrt());
        iterations += 1;
        let beta = rs_new / rs;
        rs = rs_new;
        p.scale_assign(beta);
        p.add_assign(&r)?;
    }
    Ok(CgReport {
        x,
        iterations,
        residuals,
    })
}

/// One data-consistency layer bound to a case: operator, `A^H y` and
/// solver settings.
#[derive(Debug, Clone)]
pub struct DcLayer {
    op: EncodingOperator,
    aty: ComplexTensor,
    config: DcConfig,
}

impl DcLayer {
    pub fn new(op: &EncodingOperator, y: &ComplexTensor, config: DcConfig) -> Result<Self> {
        config.validate()?;
        Ok(DcLayer {
            op: op.clone(),
            aty: op.adjoint(y)?,
            config,
        })
    }

    pub fn operator(&self) -> &EncodingOperator {
        &self.op
    }

    /// Zero-filled image `A^H y`.
    pub fn aty(&self) -> &ComplexTensor {
        &self.aty
    }

    pub fn config(&self) -> &DcConfig {
        &self.config
    }

    fn normal(&self, x: &ComplexTensor) -> Result<ComplexTensor> {
        self.op.normal(x, self.config.mu)
    }

    /// CG on `(A^H A + μI) x = A^H y + μz` from `x_0 = z`.
    pub fn forward_report(&self, z: &ComplexTensor) -> Result<CgReport> {
        let mut rhs = self.aty.clone();
        rhs.axpy(C64::new(self.config.mu, 0.0), z)?;
        conjugate_gradient(
            |v| self.normal(v),
            &rhs,
            z.clone(),
            self.config.n_cg,
            self.config.cg_tol,
        )
    }

    pub fn forward(&self, z: &ComplexTensor) -> Result<ComplexTensor> {
        Ok(self.forward_report(z)?.x)
    }

    /// `z = x + (A^H A x − A^H y)/μ`, i.e. `((A^H A + μI)x − A^H y)/μ`.
    pub fn invert(&self, x_next: &ComplexTensor) -> Result<ComplexTensor> {
        let mut d = self.op.normal(x_next, 0.0)?;
        d.axpy(C64::new(-1.0, 0.0), &self.aty)?;
        d.scale_assign(1.0 / self.config.mu);
        d.add_assign(x_next)?;
        Ok(d)
    }

    /// `μ (A^H A + μI)^{-1} seed`, the adjoint Jacobian of the exact solve
    /// with respect to `z`.
    pub fn vjp(&self, seed: &ComplexTensor) -> Result<ComplexTensor> {
        let x0 = ComplexTensor::zeros(seed.shape())?;
        let mut v = conjugate_gradient(|v| self.normal(v), seed, x0, self.config.n_cg, self.config.cg_tol)?.x;
        v.scale_assign(self.config.mu);
        Ok(v)
    }

    /// Runs [`forward`](Self::forward) and records it as one implicit node.
    pub fn forward_recorded(self: &Arc<Self>, tape: &mut Tape, z: &Var) -> Result<Var> {
        let x = self.forward(z.complex()?)?;
        tape.implicit(z, x, Arc::new(DcVjp(Arc::clone(self))))
    }
}

#[derive(Debug)]
struct DcVjp(Arc<DcLayer>);

impl ImplicitVjp for DcVjp {
    fn vjp(&self, seed: &ComplexTensor) -> Result<ComplexTensor> {
        self.0.vjp(seed)
    }

    fn label(&self) -> &'static str {
        "dc_solve"
    }
}

pub fn dc_forward(
    op: &EncodingOperator,
    y: &ComplexTensor,
    z: &ComplexTensor,
    config: DcConfig,
) -> Result<ComplexTensor> {
    DcLayer::new(op, y, config)?.forward(z)
}

pub fn dc_invert(op: &EncodingOperator, y: &ComplexTensor, x_next: &ComplexTensor, mu: f64) -> Result<ComplexTensor> {
    let config = DcConfig {
        mu,
        ..Default::default()
    };
    DcLayer::new(op, y, config)?.invert(x_next)
}

pub fn dc_vjp(op: &EncodingOperator, seed: &ComplexTensor, config: DcConfig) -> Result<ComplexTensor> {
    let y = ComplexTensor::zeros(&op.kspace_shape())?;
    DcLayer::new(op, &y, config)?.vjp(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::{make_poisson_disk_mask, make_sensitivities, SamplingMask};
    use crate::tensor::{AnyTensor, LedgerHandle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ComplexTensor {
        ComplexTensor::from_fn(shape, |_| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
        .unwrap()
    }

    fn instance(n: usize, coils: usize, r: f64, seed: u64) -> EncodingOperator {
        let mask = make_poisson_disk_mask(&[n, n], r, &[2, 2], seed).unwrap();
        let sens = make_sensitivities(&[n, n], coils, seed).unwrap();
        EncodingOperator::new(&mask, &sens).unwrap()
    }

    fn full(n: usize, coils: usize) -> EncodingOperator {
        let mask = SamplingMask::full(&[n, n]).unwrap();
        EncodingOperator::new(&mask, &make_sensitivities(&[n, n], coils, 1).unwrap()).unwrap()
    }

    fn rel(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
        a.sub(b).unwrap().norm2() / b.norm2()
    }

    /// Gaussian elimination with partial pivoting on a dense complex system.
    fn dense_solve(mut m: Vec<Vec<C64>>, mut b: Vec<C64>) -> Vec<C64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| m[i][col].norm().total_cmp(&m[j][col].norm()))
                .unwrap();
            m.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = m[row][col] / m[col][col];
                for k in col..n {
                    let v = m[col][k];
                    m[row][k] -= f * v;
                }
                let v = b[col];
                b[row] -= f * v;
            }
        }
        let mut x = vec![C64::new(0.0, 0.0); n];
        for row in (0..n).rev() {
            let s: C64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
            x[row] = (b[row] - s) / m[row][row];
        }
        x
    }

    #[test]
    fn full_mask_closed_form() {
        let op = full(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random(&op.kspace_shape(), &mut rng);
        let z = random(&[8, 8], &mut rng);
        let mu = 0.05;
        let cfg = DcConfig {
            mu,
            ..Default::default()
        };
        let want = op
            .adjoint(&y)
            .unwrap()
            .add(&z.scale(mu))
            .unwrap()
            .scale(1.0 / (1.0 + mu));
        let got = dc_forward(&op, &y, &z, cfg).unwrap();
        assert!(got.sub(&want).unwrap().max_abs() <= 1e-10);
        let back = dc_invert(&op, &y, &got, mu).unwrap();
        let closed = got
            .scale(1.0 + mu)
            .sub(&op.adjoint(&y).unwrap())
            .unwrap()
            .scale(1.0 / mu);
        assert!(back.sub(&closed).unwrap().max_abs() <= 1e-12 * closed.max_abs().max(1.0));
        let seed = random(&[8, 8], &mut rng);
        let v = dc_vjp(&op, &seed, cfg).unwrap();
        assert!(v.sub(&seed.scale(mu / (1.0 + mu))).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn consistent_data_is_a_fixed_point() {
        let op = instance(16, 2, 4.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[16, 16], &mut rng);
        let y = op.forward(&x).unwrap();
        let out = dc_forward(&op, &y, &x, DcConfig::default()).unwrap();
        assert!(out.sub(&x).unwrap().max_abs() <= 1e-10);
        let z = dc_invert(&op, &y, &x, 0.05).unwrap();
        assert!(z.sub(&x).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn cg_matches_dense_solve_on_8x8() {
        let op = instance(8, 2, 2.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = random(&op.kspace_shape(), &mut rng);
        let z = random(&[8, 8], &mut rng);
        let mu = 0.05;
        let n = 64;
        let cols: Vec<Vec<C64>> = (0..n)
            .map(|j| {
                let mut e = ComplexTensor::zeros(&[8, 8]).unwrap();
                e.data_mut()[j] = C64::new(1.0, 0.0);
                op.normal(&e, mu).unwrap().into_data()
            })
            .collect();
        let m: Vec<Vec<C64>> = (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect();
        let rhs = op.adjoint(&y).unwrap().add(&z.scale(mu)).unwrap();
        let want = ComplexTensor::from_vec(&[8, 8], dense_solve(m, rhs.into_data())).unwrap();
        // CG terminates in at most `n` steps in exact arithmetic.
        let cfg = DcConfig {
            mu,
            n_cg: n,
            cg_tol: 0.0,
        };
        let got = dc_forward(&op, &y, &z, cfg).unwrap();
        assert!(rel(&got, &want) <= 1e-8, "{}", rel(&got, &want));
    }

    #[test]
    fn cg_error_energy_norm_does_not_increase() {
        // CG minimizes the M-norm of the error over growing Krylov spaces, so
        // that norm is monotone even when the residual norm is not.
        for seed in 0..10 {
            let op = instance(16, 1 + (seed as usize % 4), 4.0, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random(&op.kspace_shape(), &mut rng);
            let z = random(&[16, 16], &mut rng);
            let mu = 0.05;
            let exact = {
                let cfg = DcConfig {
                    mu,
                    n_cg: 500,
                    cg_tol: 1e-15,
                };
                dc_forward(&op, &y, &z, cfg).unwrap()
            };
            let mut prev = f64::INFINITY;
            for k in 1..=30 {
                let cfg = DcConfig {
                    mu,
                    n_cg: k,
                    cg_tol: 0.0,
                };
                let e = dc_forward(&op, &y, &z, cfg).unwrap().sub(&exact).unwrap();
                let energy = op.normal(&e, mu).unwrap().real_inner(&e).unwrap().sqrt();
                assert!(energy <= prev * (1.0 + 1e-9) + 1e-13, "seed {seed}, k {k}");
                prev = energy;
            }
            let rep = DcLayer::new(
                &op,
                &y,
                DcConfig {
                    mu,
                    n_cg: 30,
                    cg_tol: 0.0,
                },
            )
            .unwrap()
            .forward_report(&z)
            .unwrap();
            assert!(rep.residuals.last().unwrap() < &(1e-3 * rep.residuals[0]));
        }
    }

    #[test]
    fn round_trip_with_converged_cg() {
        let op = instance(16, 3, 4.0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random(&op.kspace_shape(), &mut rng);
        let z = random(&[16, 16], &mut rng);
        let cfg = DcConfig {
            mu: 0.05,
            n_cg: 200,
            cg_tol: 1e-10,
        };
        let layer = DcLayer::new(&op, &y, cfg).unwrap();
        let rep = layer.forward_report(&z).unwrap();
        assert!(rep.iterations < 200);
        let back = layer.invert(&rep.x).unwrap();
        assert!(rel(&back, &z) <= 5e-8, "{}", rel(&back, &z));
    }

    #[test]
    fn vjp_is_self_adjoint() {
        let op = instance(16, 2, 4.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DcConfig {
            n_cg: 100,
            ..Default::default()
        };
        let s1 = random(&[16, 16], &mut rng);
        let s2 = random(&[16, 16], &mut rng);
        let a = dc_vjp(&op, &s1, cfg).unwrap().inner_product(&s2).unwrap();
        let b = s1.inner_product(&dc_vjp(&op, &s2, cfg).unwrap()).unwrap();
        assert!((a - b).norm() <= 1e-9);
    }

    #[test]
    fn vjp_matches_finite_difference_probe() {
        let op = instance(6, 2, 2.0, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = random(&op.kspace_shape(), &mut rng);
        let z = random(&[6, 6], &mut rng);
        let dz = random(&[6, 6], &mut rng);
        let s = random(&[6, 6], &mut rng);
        let cfg = DcConfig {
            n_cg: 200,
            cg_tol: 1e-14,
            ..Default::default()
        };
        let h = 1e-6;
        let fp = dc_forward(&op, &y, &z.add(&dz.scale(h)).unwrap(), cfg).unwrap();
        let fm = dc_forward(&op, &y, &z.sub(&dz.scale(h)).unwrap(), cfg).unwrap();
        let jvp = fp.sub(&fm).unwrap().scale(0.5 / h);
        let lhs = s.real_inner(&jvp).unwrap();
        let rhs = dc_vjp(&op, &s, cfg).unwrap().real_inner(&dz).unwrap();
        assert!((lhs - rhs).abs() <= 1e-5 * rhs.abs().max(1e-3), "{lhs} vs {rhs}");
    }

    #[test]
    fn recorded_node_backpropagates_through_vjp() {
        let op = instance(8, 2, 2.0, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = random(&op.kspace_shape(), &mut rng);
        let z = random(&[8, 8], &mut rng);
        let layer = Arc::new(DcLayer::new(&op, &y, DcConfig::default()).unwrap());
        let mut tape = Tape::new(LedgerHandle::default());
        let zv = tape.leaf(z.clone()).unwrap();
        let xv = layer.forward_recorded(&mut tape, &zv).unwrap();
        assert_eq!(xv.complex().unwrap(), &layer.forward(&z).unwrap());
        assert_eq!(tape.retained_bytes(), 0);
        let seed = random(&[8, 8], &mut rng);
        let g = tape.backward(&xv, AnyTensor::Complex(seed.clone()), &[&zv]).unwrap();
        assert_eq!(g.complex(&zv).unwrap(), &layer.vjp(&seed).unwrap());
    }

    #[test]
    fn rejects_nonpositive_mu() {
        let op = full(4, 1);
        let y = ComplexTensor::zeros(&op.kspace_shape()).unwrap();
        let x = ComplexTensor::zeros(&[4, 4]).unwrap();
        assert!(dc_invert(&op, &y, &x, 0.0).is_err());
        assert!(dc_invert(&op, &y, &x, -1.0).is_err());
    }
}
