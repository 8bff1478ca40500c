//! Multi-coil encoding `A = M F S` on a synthetic phantom: adjointness,
//! unitarity of the centered FFT, and the zero-filled image `A^H y`.

use modl_mel::mri::{make_phantom, make_poisson_disk_mask, make_sensitivities, EncodingOperator, PhantomKind};
use modl_mel::tensor::{fft_centered, ifft_centered};
use modl_mel::train::{psnr, zero_filled};

fn main() -> modl_mel::Result<()> {
    let shape = [32, 32];
    let x = make_phantom(&shape, PhantomKind::Static2d, 1)?;
    let sens = make_sensitivities(&shape, 4, 1)?;
    let mask = make_poisson_disk_mask(&shape, 4.0, &[6, 6], 1)?;
    let op = EncodingOperator::new(&mask, &sens)?;

    let k = fft_centered(&x, &[0, 1])?;
    println!("‖F x‖ / ‖x‖ = {:.15}", k.norm2() / x.norm2());
    let back = ifft_centered(&k, &[0, 1])?;
    println!("‖F^H F x - x‖ = {:.2e}", back.sub(&x)?.norm2());

    let y = op.forward(&x)?;
    println!(
        "k-space shape {:?}, realized R = {:.3}",
        y.shape(),
        mask.realized_acceleration()
    );
    let lhs = y.inner_product(&y)?;
    let rhs = x.inner_product(&op.adjoint(&y)?)?;
    println!("<Ax, y> = {lhs:.6}, <x, A^H y> = {rhs:.6}");

    let zf = zero_filled(&op, &y)?;
    println!("zero-filled pSNR = {:.2} dB", psnr(&zf, &x)?);
    Ok(())
}
