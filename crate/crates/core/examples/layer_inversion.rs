//! Inverting both layer types of an unroll: the residual regularizer by
//! fixed-point iteration and the data-consistency solve in closed form.

use modl_mel::mri::{build_case, DatasetConfig, Split};
use modl_mel::unrolled::{dc_forward, dc_invert, DcConfig, RegularizerConfig, RegularizerParams};

fn main() -> modl_mel::Result<()> {
    let case = build_case(&DatasetConfig::default(), 0, Split::Train)?;
    let op = case.operator()?;
    let z = case.x.clone();

    let reg = RegularizerParams::random(RegularizerConfig::default(), 0)?;
    println!(
        "regularizer Lipschitz bound of the residual branch: {:.3}",
        reg.lipschitz_bound()
    );
    let w = reg.forward(&z)?;
    let inv = reg.invert(&w, 1e-12, 200)?;
    println!(
        "fixed-point inversion: {} iterations, relative error {:.2e}",
        inv.iterations,
        inv.x.sub(&z)?.norm2() / z.norm2()
    );
    for (i, r) in inv.residuals.iter().take(6).enumerate() {
        println!("  step {i}: {r:.3e}");
    }

    let cfg = DcConfig {
        n_cg: 100,
        cg_tol: 1e-12,
        ..DcConfig::default()
    };
    let x = dc_forward(&op, &case.y, &z, cfg)?;
    let back = dc_invert(&op, &case.y, &x, cfg.mu)?;
    println!(
        "data consistency (mu = {}): round-trip relative error {:.2e}",
        cfg.mu,
        back.sub(&z)?.norm2() / z.norm2()
    );
    Ok(())
}
