//! Variable-density Poisson-disk and k-t masks at several accelerations,
//! printed as ASCII so the density profile is visible.

use modl_mel::mri::{make_kt_mask, make_poisson_disk_mask, SamplingMask};

fn draw(m: &SamplingMask, rows: usize, cols: usize, offset: usize) {
    let v = m.values().data();
    for y in 0..rows {
        let line: String = (0..cols)
            .map(|x| if v[offset + y * cols + x] > 0.0 { '#' } else { '.' })
            .collect();
        println!("  {line}");
    }
}

fn main() -> modl_mel::Result<()> {
    for r in [2.0, 4.0, 8.0] {
        let m = make_poisson_disk_mask(&[32, 32], r, &[6, 6], 3)?;
        println!(
            "Poisson disk, R = {r}: {} samples, realized R = {:.3}",
            m.ones(),
            m.realized_acceleration()
        );
    }
    let m = make_poisson_disk_mask(&[24, 24], 4.0, &[4, 4], 3)?;
    println!("24x24 Poisson disk at R = 4:");
    draw(&m, 24, 24, 0);

    let kt = make_kt_mask(&[24, 24], 6, 4.0, 3)?;
    println!(
        "k-t mask, 6 frames at R = 4: realized R = {:.3}",
        kt.realized_acceleration()
    );
    for t in 0..3 {
        let lines: Vec<usize> = (0..24)
            .filter(|&ky| kt.values().data()[(t * 24 + ky) * 24] > 0.0)
            .collect();
        println!("  frame {t}: ky lines {lines:?}");
    }
    Ok(())
}
