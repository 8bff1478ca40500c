//! Standard backpropagation against layer-inversion backpropagation on one
//! case: gradient agreement, retained tape bytes and wall time per depth.
//! With the default ten CG iterations the engines agree to the level of CG
//! truncation, amplified with depth.

use modl_mel::mel::{backprop_mel, backprop_standard, MelConfig};
use modl_mel::mri::{build_case, DatasetConfig, Split};
use modl_mel::unrolled::{NetConfig, UnrolledNetParams};

fn main() -> modl_mel::Result<()> {
    let case = build_case(&DatasetConfig::default(), 0, Split::Train)?;
    let op = case.operator()?;
    let mel = MelConfig::default();
    println!(
        "{:>3} {:>12} {:>12} {:>9} {:>9} {:>12}",
        "N", "std bytes", "mel bytes", "std s", "mel s", "grad diff"
    );
    for n in [1, 2, 5, 10] {
        let net = NetConfig {
            n_unrolls: n,
            ..NetConfig::default()
        };
        let p = UnrolledNetParams::random(net, 0)?;
        let s = backprop_standard(&p, &op, &case.y, &case.x)?;
        let m = backprop_mel(&p, &op, &case.y, &case.x, &mel)?;
        println!(
            "{n:>3} {:>12} {:>12} {:>9.4} {:>9.4} {:>12.2e}",
            s.peak_tape_bytes,
            m.peak_tape_bytes,
            s.wall_time,
            m.wall_time,
            m.grads.max_rel_diff(&s.grads)
        );
    }
    Ok(())
}
