//! Trains a five-unroll network on the default synthetic dataset and compares
//! it with the zero-filled and CG-SENSE baselines on the validation split.
//! Pass `mel` as the first argument to train with layer inversion.

use modl_mel::mel::Engine;
use modl_mel::mri::{build_dataset, DatasetConfig, Split};
use modl_mel::train::{cg_sense, psnr, train_loop, validate, zero_filled, Prepared, TrainConfig};

fn main() -> modl_mel::Result<()> {
    let engine = match std::env::args().nth(1).as_deref() {
        Some("mel") => Engine::Mel,
        _ => Engine::Standard,
    };
    let ds = build_dataset(&DatasetConfig::default())?;
    let val = Prepared::split(&ds, Split::Val)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let zf = mean(
        val.iter()
            .map(|c| psnr(&zero_filled(&c.op, &c.y).unwrap(), &c.x).unwrap())
            .collect(),
    );
    let cg = mean(
        val.iter()
            .map(|c| psnr(&cg_sense(&c.op, &c.y, 1e-3, 30).unwrap(), &c.x).unwrap())
            .collect(),
    );

    let cfg = TrainConfig {
        engine,
        ..TrainConfig::default()
    };
    let out = train_loop(cfg, &ds, None)?;
    for r in out.log.iter().step_by(5) {
        println!(
            "epoch {:>3} loss {:.5} val pSNR {:.2} dB",
            r.epoch,
            r.train_loss,
            r.val_psnr.unwrap_or(f64::NAN)
        );
    }
    let v = validate(&out.best, &val)?;
    println!("zero-filled {zf:.2} dB, CG-SENSE {cg:.2} dB");
    println!(
        "MoDL ({engine}, best epoch {}): {:.2} dB, SSIM {:.4}",
        out.best_epoch,
        v.mean_psnr(),
        v.mean_ssim()
    );
    Ok(())
}
