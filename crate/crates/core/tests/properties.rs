use modl_mel::mri::{make_kt_mask, make_poisson_disk_mask, make_sensitivities, EncodingOperator};
use modl_mel::tensor::{fft_centered, ifft_centered, ComplexTensor, C64};
use modl_mel::unrolled::{dc_forward, dc_invert, DcConfig, RegularizerConfig, RegularizerParams};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(shape: &[usize], seed: u64) -> ComplexTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComplexTensor::from_fn(shape, |_| {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
    .unwrap()
}

fn rel(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
    a.sub(b).unwrap().norm2() / b.norm2()
}

/// `None` when no mask on this grid lands near the requested acceleration.
fn operator(n: usize, coils: usize, r: f64, seed: u64) -> Option<EncodingOperator> {
    let sens = make_sensitivities(&[n, n], coils, seed).unwrap();
    let mask = make_poisson_disk_mask(&[n, n], r, &[2, 2], seed).ok()?;
    Some(EncodingOperator::new(&mask, &sens).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, rng_seed: RngSeed::Fixed(7), ..ProptestConfig::default() })]

    #[test]
    fn fft_is_unitary(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let x = random_image(&[h, w], seed);
        let k = fft_centered(&x, &[0, 1]).unwrap();
        prop_assert!((k.norm2() - x.norm2()).abs() <= 1e-12 * x.norm2());
        prop_assert!(rel(&ifft_centered(&k, &[0, 1]).unwrap(), &x) <= 1e-12);
    }

    #[test]
    fn encoding_is_adjoint(n in 8usize..20, coils in 1usize..5, r in 1.5f64..5.0, seed in any::<u64>()) {
        let op = operator(n, coils, r, seed);
        prop_assume!(op.is_some());
        let op = op.unwrap();
        let x = random_image(&[n, n], seed ^ 1);
        let y = random_image(&op.kspace_shape(), seed ^ 2);
        let ax = op.forward(&x).unwrap();
        let lhs = ax.inner_product(&y).unwrap();
        let rhs = x.inner_product(&op.adjoint(&y).unwrap()).unwrap();
        prop_assert!((lhs - rhs).norm() <= 1e-10 * ax.norm2() * y.norm2());
    }

    #[test]
    fn dc_layer_inverts(mu in 0.5f64..4.0, coils in 1usize..4, seed in any::<u64>()) {
        let op = operator(12, coils, 3.0, seed);
        prop_assume!(op.is_some());
        let op = op.unwrap();
        let y = op.forward(&random_image(&[12, 12], seed ^ 3)).unwrap();
        let z = random_image(&[12, 12], seed ^ 4);
        let cfg = DcConfig { mu, n_cg: 100, cg_tol: 1e-13 };
        let x = dc_forward(&op, &y, &z, cfg).unwrap();
        prop_assert!(rel(&dc_invert(&op, &y, &x, mu).unwrap(), &z) <= 1e-8);
    }

    #[test]
    fn regularizer_inverts(channels in 2usize..8, layers in 2usize..6, seed in any::<u64>()) {
        let cfg = RegularizerConfig { channels, layers, ..RegularizerConfig::default() };
        let reg = RegularizerParams::random(cfg, seed).unwrap();
        let z = random_image(&[10, 10], seed ^ 5);
        let inv = reg.invert(&reg.forward(&z).unwrap(), 1e-11, 200).unwrap();
        prop_assert!(rel(&inv.x, &z) <= 1e-9);
    }

    #[test]
    fn masks_hit_requested_acceleration(r in 2.0f64..6.0, seed in any::<u64>()) {
        let m = make_poisson_disk_mask(&[32, 32], r, &[6, 6], seed).unwrap();
        prop_assert!((m.realized_acceleration() / r - 1.0).abs() <= 0.15);
        let kt = make_kt_mask(&[32, 32], 6, r, seed).unwrap();
        prop_assert!((kt.realized_acceleration() / r - 1.0).abs() <= 0.15);
    }
}
