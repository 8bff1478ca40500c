//! Dense real and complex tensors.
//!
//! Every tensor carries an [`AllocId`] drawn from a process-wide counter at
//! construction (including clones), so the [`MemoryLedger`] can attribute
//! bytes to individual buffers. Operations here are plain functions of their
//! inputs and know nothing about gradients.

mod conv;
mod fft;
mod ledger;
pub mod melt;

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::sync::atomic::{AtomicU64, Ordering};

pub use num_complex::Complex64;

pub use conv::{conv_nd, conv_nd_backward_input, conv_nd_backward_weight, ConvGeometry};
pub use fft::{fft_centered, ifft_centered};
pub use ledger::{LedgerEvent, LedgerHandle, MemoryLedger};

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const MAX_RANK: usize = 5;

static NEXT_ALLOC: AtomicU64 = AtomicU64::new(1);

/// Identifier of one tensor buffer, unique for the lifetime of the process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AllocId(pub u64);

impl AllocId {
    fn fresh() -> Self {
        AllocId(NEXT_ALLOC.fetch_add(1, Ordering::Relaxed))
    }
}

impl std::fmt::Display for AllocId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Sample type of a tensor: `f64` or `Complex64`.
pub trait Element:
    Copy
    + Default
    + PartialEq
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Mul<f64, Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    /// Payload bytes per sample.
    const BYTES: usize;
    const IS_COMPLEX: bool;

    fn conj(self) -> Self;
    fn norm_sqr(self) -> f64;
    fn is_finite(self) -> bool;
}

impl Element for f64 {
    const BYTES: usize = 8;
    const IS_COMPLEX: bool = false;

    fn conj(self) -> Self {
        self
    }
    fn norm_sqr(self) -> f64 {
        self * self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

impl Element for C64 {
    const BYTES: usize = 16;
    const IS_COMPLEX: bool = true;

    fn conj(self) -> Self {
        Complex64::conj(&self)
    }
    fn norm_sqr(self) -> f64 {
        Complex64::norm_sqr(&self)
    }
    fn is_finite(self) -> bool {
        Complex64::is_finite(self)
    }
}

/// Row-major dense tensor of rank 1 to 5.
#[derive(Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    alloc_id: AllocId,
}

pub type ComplexTensor = Tensor<C64>;
pub type RealTensor = Tensor<f64>;

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            alloc_id: AllocId::fresh(),
        }
    }
}

impl<T: Element> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![T::default(); n],
            alloc_id: AllocId::fresh(),
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Format(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            alloc_id: AllocId::fresh(),
        })
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
            alloc_id: AllocId::fresh(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn alloc_id(&self) -> AllocId {
        self.alloc_id
    }

    /// Exact payload size: 8 bytes per real sample, 16 per complex sample.
    pub fn payload_bytes(&self) -> usize {
        self.data.len() * T::BYTES
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(&self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            alloc_id: AllocId::fresh(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            alloc_id: AllocId::fresh(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| v * a)
    }

    pub fn conj(&self) -> Self {
        self.map(|v| v.conj())
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: T, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (s, &o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (s, &o) in self.data.iter_mut().zip(&other.data) {
            *s += o;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, a: f64) {
        for v in &mut self.data {
            *v = *v * a;
        }
    }

    /// `⟨self, other⟩ = Σ conj(self_i)·other_i`.
    pub fn inner_product(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        let mut acc = T::default();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc += a.conj() * b;
        }
        Ok(acc)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn norm2(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr().sqrt()).fold(0.0, f64::max)
    }
}

impl RealTensor {
    pub fn relu(&self) -> Self {
        self.map(relu)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

impl ComplexTensor {
    pub fn abs(&self) -> RealTensor {
        RealTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.norm()).collect(),
            alloc_id: AllocId::fresh(),
        }
    }

    pub fn from_real(x: &RealTensor) -> Self {
        ComplexTensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| C64::new(v, 0.0)).collect(),
            alloc_id: AllocId::fresh(),
        }
    }

    /// Real part of `⟨self, other⟩`, the inner product of the underlying
    /// real vector space.
    pub fn real_inner(&self, other: &Self) -> Result<f64> {
        Ok(self.inner_product(other)?.re)
    }

    /// Multiplies by a complex scalar.
    pub fn scale_complex(&self, a: C64) -> Self {
        self.map(|v| v * a)
    }
}

/// Either a real or a complex tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    Real(RealTensor),
    Complex(ComplexTensor),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::Real(t) => t.shape(),
            AnyTensor::Complex(t) => t.shape(),
        }
    }

    pub fn alloc_id(&self) -> AllocId {
        match self {
            AnyTensor::Real(t) => t.alloc_id(),
            AnyTensor::Complex(t) => t.alloc_id(),
        }
    }

    pub fn payload_bytes(&self) -> usize {
        match self {
            AnyTensor::Real(t) => t.payload_bytes(),
            AnyTensor::Complex(t) => t.payload_bytes(),
        }
    }

    pub fn is_complex(&self) -> bool {
        matches!(self, AnyTensor::Complex(_))
    }

    pub fn as_real(&self) -> Result<&RealTensor> {
        match self {
            AnyTensor::Real(t) => Ok(t),
            AnyTensor::Complex(_) => Err(Error::TypeMismatch("expected a real tensor")),
        }
    }

    pub fn as_complex(&self) -> Result<&ComplexTensor> {
        match self {
            AnyTensor::Complex(t) => Ok(t),
            AnyTensor::Real(_) => Err(Error::TypeMismatch("expected a complex tensor")),
        }
    }

    pub fn into_real(self) -> Result<RealTensor> {
        match self {
            AnyTensor::Real(t) => Ok(t),
            AnyTensor::Complex(_) => Err(Error::Format("expected real64 tensor".into())),
        }
    }

    pub fn into_complex(self) -> Result<ComplexTensor> {
        match self {
            AnyTensor::Complex(t) => Ok(t),
            AnyTensor::Real(_) => Err(Error::Format("expected complex128 tensor".into())),
        }
    }

    /// `self += other`; both must have the same kind and shape.
    pub fn accumulate(&mut self, other: &AnyTensor) -> Result<()> {
        match (self, other) {
            (AnyTensor::Real(a), AnyTensor::Real(b)) => a.add_assign(b),
            (AnyTensor::Complex(a), AnyTensor::Complex(b)) => a.add_assign(b),
            _ => Err(Error::TypeMismatch("cannot add real and complex tensors")),
        }
    }

    pub fn scale(&self, a: f64) -> AnyTensor {
        match self {
            AnyTensor::Real(t) => AnyTensor::Real(t.scale(a)),
            AnyTensor::Complex(t) => AnyTensor::Complex(t.scale(a)),
        }
    }
}

impl From<RealTensor> for AnyTensor {
    fn from(t: RealTensor) -> Self {
        AnyTensor::Real(t)
    }
}

impl From<ComplexTensor> for AnyTensor {
    fn from(t: ComplexTensor) -> Self {
        AnyTensor::Complex(t)
    }
}

/// ReLU with the subgradient convention `relu'(0) = 0`.
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Stacks real and imaginary parts as two leading channels: `[s...] -> [2, s...]`.
pub fn complex_to_channels(x: &ComplexTensor) -> Result<RealTensor> {
    if x.rank() >= MAX_RANK {
        return Err(Error::InvalidShape(x.shape.clone()));
    }
    let n = x.len();
    let mut data = vec![0.0; 2 * n];
    for (i, v) in x.data.iter().enumerate() {
        data[i] = v.re;
        data[n + i] = v.im;
    }
    let mut shape = Vec::with_capacity(x.rank() + 1);
    shape.push(2);
    shape.extend_from_slice(&x.shape);
    RealTensor::from_vec(&shape, data)
}

/// Inverse of [`complex_to_channels`]: `[2, s...] -> [s...]`.
pub fn channels_to_complex(x: &RealTensor) -> Result<ComplexTensor> {
    if x.rank() < 2 || x.shape[0] != 2 {
        return Err(Error::TypeMismatch(
            "channels_to_complex expects a leading channel axis of extent 2",
        ));
    }
    let n = x.len() / 2;
    let (re, im) = x.data.split_at(n);
    let data = re.iter().zip(im).map(|(&r, &i)| C64::new(r, i)).collect();
    ComplexTensor::from_vec(&x.shape[1..], data)
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
