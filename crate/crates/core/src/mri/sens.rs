use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, C64};

/// Coil sensitivities `[C, spatial...]`, normalized so that
/// `Σ_c |S_c|² = 1` at every voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMaps {
    maps: Arc<ComplexTensor>,
}

impl SensitivityMaps {
    /// Wraps maps as given; they are expected to be SOS-normalized.
    pub fn new(maps: ComplexTensor) -> Result<Self> {
        if maps.rank() < 2 {
            return Err(Error::InvalidParameter(
                "sensitivity maps need a coil axis and at least one spatial axis".into(),
            ));
        }
        Ok(SensitivityMaps { maps: Arc::new(maps) })
    }

    /// Divides every coil by the root-sum-of-squares over coils.
    pub fn normalized(mut maps: ComplexTensor) -> Result<Self> {
        let coils = maps.shape()[0];
        let m = maps.len() / coils;
        let d = maps.data_mut();
        for i in 0..m {
            let sos: f64 = (0..coils).map(|c| d[c * m + i].norm_sqr()).sum::<f64>().sqrt();
            if sos == 0.0 {
                return Err(Error::InvalidParameter("sensitivities vanish at a voxel".into()));
            }
            for c in 0..coils {
                d[c * m + i] /= sos;
            }
        }
        Self::new(maps)
    }

    pub fn coils(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.maps.shape()[1..]
    }

    pub fn maps(&self) -> &ComplexTensor {
        &self.maps
    }

    pub fn maps_arc(&self) -> Arc<ComplexTensor> {
        Arc::clone(&self.maps)
    }

    /// Largest deviation of `Σ_c |S_c|²` from 1.
    pub fn sos_error(&self) -> f64 {
        let coils = self.coils();
        let m = self.maps.len() / coils;
        let d = self.maps.data();
        (0..m)
            .map(|i| ((0..coils).map(|c| d[c * m + i].norm_sqr()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Smooth synthetic coil profiles: complex Gaussian lobes centered on a ring
/// around the field of view, with gentle linear phase, then SOS-normalized.
/// For 3-D spatial shapes the in-plane profile is repeated along the first
/// axis.
pub fn make_sensitivities(spatial: &[usize], coils: usize, seed: u64) -> Result<SensitivityMaps> {
    if coils == 0 {
        return Err(Error::InvalidParameter("need at least one coil".into()));
    }
    if spatial.len() < 2 || spatial.len() > 3 {
        return Err(Error::InvalidParameter(format!(
            "sensitivities need 2 or 3 spatial axes, got {spatial:?}"
        )));
    }
    let (ny, nx) = (spatial[spatial.len() - 2], spatial[spatial.len() - 1]);
    let depth: usize = spatial[..spatial.len() - 2].iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 0.6;
    let lobes: Vec<(f64, f64, f64, f64, f64)> = (0..coils)
        .map(|c| {
            let angle = 2.0 * PI * c as f64 / coils as f64 + rng.random_range(-0.2..0.2);
            let ring = 0.7 + rng.random_range(-0.05..0.05);
            let phase0 = rng.random_range(-PI..PI);
            let slope_y = rng.random_range(-0.5..0.5);
            let slope_x = rng.random_range(-0.5..0.5);
            (ring * angle.sin(), ring * angle.cos(), phase0, slope_y, slope_x)
        })
        .collect();
    let mut shape = vec![coils];
    shape.extend_from_slice(spatial);
    let plane = ny * nx;
    let m = depth * plane;
    let maps = ComplexTensor::from_fn(&shape, |i| {
        let c = i / m;
        let p = i % plane;
        let v = 2.0 * (p / nx) as f64 / ny as f64 - 1.0;
        let u = 2.0 * (p % nx) as f64 / nx as f64 - 1.0;
        let (cy, cx, ph, sy, sx) = lobes[c];
        let r2 = (v - cy).powi(2) + (u - cx).powi(2);
        let mag = (-r2 / (2.0 * width * width)).exp();
        C64::from_polar(mag, ph + sy * v + sx * u)
    })?;
    SensitivityMaps::normalized(maps)
}
