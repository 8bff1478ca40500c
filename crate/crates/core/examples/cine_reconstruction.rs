//! Dynamic (cine) reconstruction: a `[T, H, W]` phantom sampled with an
//! interleaved k-t mask, reconstructed by a 3-D convolutional network trained
//! briefly with layer inversion.

use modl_mel::mel::Engine;
use modl_mel::mri::{build_dataset, DatasetConfig, PhantomKind, Split};
use modl_mel::train::{cg_sense, psnr, train_loop, validate, zero_filled, Prepared, TrainConfig};

fn main() -> modl_mel::Result<()> {
    let ds = build_dataset(&DatasetConfig {
        shape: vec![6, 24, 24],
        kind: PhantomKind::Cine { amplitude: 0.15 },
        coils: 4,
        n_train: 6,
        n_val: 2,
        n_test: 1,
        ..DatasetConfig::default()
    })?;
    let val = Prepared::split(&ds, Split::Val)?;
    for c in &val {
        println!(
            "case {}: zero-filled {:.2} dB, CG-SENSE {:.2} dB",
            c.id,
            psnr(&zero_filled(&c.op, &c.y)?, &c.x)?,
            psnr(&cg_sense(&c.op, &c.y, 1e-3, 30)?, &c.x)?
        );
    }
    let mut cfg = TrainConfig {
        engine: Engine::Mel,
        epochs: 15,
        ..TrainConfig::default()
    };
    cfg.net.regularizer.spatial_rank = 3;
    cfg.net.regularizer.channels = 8;
    cfg.net.n_unrolls = 8;
    let out = train_loop(cfg, &ds, None)?;
    let v = validate(&out.best, &val)?;
    println!(
        "MoDL 3-D, {} unrolls, after {} epochs: {:.2} dB, SSIM {:.4}",
        cfg.net.n_unrolls,
        cfg.epochs,
        v.mean_psnr(),
        v.mean_ssim()
    );
    Ok(())
}
