//! The reverse-mode tape on a tiny graph: FFT, masking and an l1 loss, with
//! the gradient checked against a finite difference.

use modl_mel::autodiff::Tape;
use modl_mel::tensor::{ComplexTensor, LedgerHandle, RealTensor, C64};
use std::sync::Arc;

fn loss(x: &ComplexTensor, mask: &Arc<RealTensor>, target: &ComplexTensor) -> modl_mel::Result<f64> {
    let mut tape = Tape::new(LedgerHandle::new());
    let xv = tape.leaf(x.clone())?;
    let tv = tape.leaf(target.clone())?;
    let k = tape.fft(&xv, &[0, 1])?;
    let m = tape.mask_multiply(&k, mask.clone())?;
    let l = tape.l1_loss(&m, &tv)?;
    Ok(l.real()?.data()[0])
}

fn main() -> modl_mel::Result<()> {
    let x = ComplexTensor::from_fn(&[4, 4], |i| C64::new((i as f64 * 0.7).sin(), (i as f64 * 0.3).cos()))?;
    let target = ComplexTensor::from_fn(&[4, 4], |i| C64::new(0.1 * i as f64, -0.05 * i as f64))?;
    let mask = Arc::new(RealTensor::from_fn(&[4, 4], |i| (i % 3 != 0) as u8 as f64)?);

    let ledger = LedgerHandle::new();
    let mut tape = Tape::new(ledger.clone());
    let xv = tape.leaf(x.clone())?;
    let tv = tape.leaf(target.clone())?;
    let k = tape.fft(&xv, &[0, 1])?;
    let m = tape.mask_multiply(&k, mask.clone())?;
    let l = tape.l1_loss(&m, &tv)?;
    println!(
        "loss = {:.6}, {} nodes, {} bytes retained",
        l.real()?.data()[0],
        tape.len(),
        tape.retained_bytes()
    );
    for node in tape.nodes() {
        println!("  {:<14} saves {} tensor(s)", node.op.name(), node.saved().len());
    }
    let seed = RealTensor::from_vec(&[1], vec![1.0])?;
    let grads = tape.backward(&l, seed.into(), &[&xv])?;
    let g = grads.complex(&xv)?;

    let h = 1e-6;
    let mut bumped = x.clone();
    bumped.data_mut()[6] += C64::new(h, 0.0);
    let up = loss(&bumped, &mask, &target)?;
    bumped.data_mut()[6] -= C64::new(2.0 * h, 0.0);
    let down = loss(&bumped, &mask, &target)?;
    println!(
        "d loss / d Re x[6]: tape {:.8}, finite difference {:.8}",
        g.data()[6].re,
        (up - down) / (2.0 * h)
    );

    tape.dispose();
    println!(
        "after dispose: {} live bytes, peak {}",
        ledger.live_bytes(),
        ledger.peak_bytes()
    );
    Ok(())
}
