use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ComplexTensor;

/// Binary 8-bit PGM of `|x|`, min-max normalized. Frames of a `[T, H, W]`
/// series are tiled left to right.
pub fn write_magnitude_pgm(path: impl AsRef<Path>, x: &ComplexTensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = magnitude_pgm(x)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn magnitude_pgm(x: &ComplexTensor) -> Result<Vec<u8>> {
    let shape = x.shape();
    let (frames, h, w) = match *shape {
        [h, w] => (1, h, w),
        [t, h, w] => (t, h, w),
        _ => {
            return Err(Error::InvalidParameter(format!(
                "PGM previews need [H, W] or [T, H, W], got {shape:?}"
            )))
        }
    };
    let mag: Vec<f64> = x.data().iter().map(|v| v.norm()).collect();
    let lo = mag.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = frames * w;
    let mut out = format!("P5\n{width} {h}\n255\n").into_bytes();
    for y in 0..h {
        for t in 0..frames {
            for xx in 0..w {
                let v = (mag[(t * h + y) * w + xx] - lo) / span;
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::C64;

    #[test]
    fn header_and_range() {
        let x = ComplexTensor::from_fn(&[2, 3], |i| C64::new(i as f64, 0.0)).unwrap();
        let p = magnitude_pgm(&x).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&p[..header.len()], header);
        assert_eq!(&p[header.len()..], &[0, 51, 102, 153, 204, 255]);
    }

    #[test]
    fn frames_are_tiled() {
        let x = ComplexTensor::from_fn(&[2, 1, 2], |i| C64::new(0.0, i as f64)).unwrap();
        let p = magnitude_pgm(&x).unwrap();
        assert!(p.starts_with(b"P5\n4 1\n255\n"));
        assert_eq!(p.len(), b"P5\n4 1\n255\n".len() + 4);
    }
}
