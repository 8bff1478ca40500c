use std::sync::Arc;

use super::{SamplingMask, SensitivityMaps};
use crate::autodiff::{apply_mask, sens_combine, sens_expand};
use crate::error::{Error, Result};
use crate::tensor::{fft_centered, ifft_centered, ComplexTensor, RealTensor};

/// Multi-coil Cartesian encoding `A = P·F·S`.
///
/// Images have shape `[lead..., spatial...]` where the sensitivity maps
/// `[C, spatial...]` cover the trailing spatial axes; those axes are Fourier
/// transformed and any leading axes (e.g. cine frames) are carried along.
/// The mask has the full image shape.
#[derive(Debug, Clone)]
pub struct EncodingOperator {
    mask: Arc<RealTensor>,
    sens: Arc<ComplexTensor>,
    image_shape: Vec<usize>,
    image_fft_dims: Vec<usize>,
    kspace_fft_dims: Vec<usize>,
}

impl EncodingOperator {
    pub fn new(mask: &SamplingMask, sens: &SensitivityMaps) -> Result<Self> {
        let image_shape = mask.shape().to_vec();
        let spatial = sens.spatial_shape();
        if spatial.len() > image_shape.len() || !image_shape.ends_with(spatial) {
            return Err(Error::shape(&image_shape, spatial));
        }
        let lead = image_shape.len() - spatial.len();
        let image_fft_dims: Vec<usize> = (lead..image_shape.len()).collect();
        let kspace_fft_dims = image_fft_dims.iter().map(|d| d + 1).collect();
        Ok(EncodingOperator {
            mask: mask.values_arc(),
            sens: sens.maps_arc(),
            image_shape,
            image_fft_dims,
            kspace_fft_dims,
        })
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn kspace_shape(&self) -> Vec<usize> {
        let mut s = vec![self.coils()];
        s.extend_from_slice(&self.image_shape);
        s
    }

    pub fn coils(&self) -> usize {
        self.sens.shape()[0]
    }

    pub fn mask(&self) -> &Arc<RealTensor> {
        &self.mask
    }

    pub fn sens(&self) -> &Arc<ComplexTensor> {
        &self.sens
    }

    pub fn image_fft_dims(&self) -> &[usize] {
        &self.image_fft_dims
    }

    pub fn kspace_fft_dims(&self) -> &[usize] {
        &self.kspace_fft_dims
    }

    fn check_image(&self, x: &ComplexTensor) -> Result<()> {
        if x.shape() != self.image_shape.as_slice() {
            return Err(Error::shape(&self.image_shape, x.shape()));
        }
        Ok(())
    }

    /// `y_c = P ⊙ F(S_c ⊙ x)`.
    pub fn forward(&self, x: &ComplexTensor) -> Result<ComplexTensor> {
        self.check_image(x)?;
        let coil_images = sens_expand(x, &self.sens)?;
        let k = fft_centered(&coil_images, &self.kspace_fft_dims)?;
        apply_mask(&k, &self.mask)
    }

    /// `A^H y = Σ_c conj(S_c) ⊙ F^H(P ⊙ y_c)`.
    pub fn adjoint(&self, y: &ComplexTensor) -> Result<ComplexTensor> {
        let ks = self.kspace_shape();
        if y.shape() != ks.as_slice() {
            return Err(Error::shape(&ks, y.shape()));
        }
        let masked = apply_mask(y, &self.mask)?;
        let coil_images = ifft_centered(&masked, &self.kspace_fft_dims)?;
        sens_combine(&coil_images, &self.sens)
    }

    /// `(A^H A + μ I) x`.
    pub fn normal(&self, x: &ComplexTensor, mu: f64) -> Result<ComplexTensor> {
        if mu < 0.0 || !mu.is_finite() {
            return Err(Error::InvalidParameter(format!("mu must be >= 0, got {mu}")));
        }
        let mut out = self.adjoint(&self.forward(x)?)?;
        if mu != 0.0 {
            out.axpy(crate::tensor::C64::new(mu, 0.0), x)?;
        }
        Ok(out)
    }
}
