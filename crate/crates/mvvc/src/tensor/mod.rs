//! Dense tensors with exactly the layer set the classification network
//! needs, reverse-mode gradients over a fixed layer sequence, and the
//! momentum optimizer with exponential learning-rate decay.
//!
//! There is no general computation graph: the network is a static
//! feed-forward chain, so a per-layer trace is recorded on the forward pass
//! and consumed by [`chain::Chain::backward`].

pub mod chain;
pub mod ops;
pub mod optim;

use thiserror::Error;

/// Scalar element type. Tests and gradient checks require `f64`; the `f32`
/// feature trades precision for speed in production runs.
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {message}")]
    Shape { op: &'static str, message: String },
    #[error("maxpool3d: window {window:?} exceeds input extents {input:?}")]
    PoolTooLarge { window: [usize; 3], input: [usize; 3] },
    #[error("softmax_cross_entropy: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

fn shape_err(op: &'static str, message: impl Into<String>) -> TensorError {
    TensorError::Shape { op, message: message.into() }
}

/// Row-major dense tensor. Every extent is at least one and the data length
/// equals the product of the extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: Scalar) -> Self {
        assert!(shape.iter().all(|&e| e >= 1), "tensor extents must be >= 1: {shape:?}");
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Scalar>) -> Self {
        assert!(shape.iter().all(|&e| e >= 1), "tensor extents must be >= 1: {shape:?}");
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {shape:?} does not match data length {}", data.len());
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar_value(&self) -> Scalar {
        assert_eq!(self.data.len(), 1, "not a scalar tensor");
        self.data[0]
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

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    /// Same data, new shape; the element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise `self += rhs`, shapes must match exactly.
    pub fn add_assign(&mut self, rhs: &Tensor) {
        assert_eq!(self.shape, rhs.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += *b;
        }
    }

    /// Elementwise `self += s * rhs`.
    pub fn add_scaled(&mut self, rhs: &Tensor, s: Scalar) {
        assert_eq!(self.shape, rhs.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += s * *b;
        }
    }

    pub fn scale(&mut self, s: Scalar) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_shape() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0; 6]);
        assert_eq!(t.len(), 6);
        assert_eq!(t.rank(), 2);
    }

    #[test]
    #[should_panic]
    fn zero_extent_rejected() {
        let _ = Tensor::zeros(&[2, 0]);
    }

    #[test]
    #[should_panic]
    fn length_mismatch_rejected() {
        let _ = Tensor::from_vec(&[2, 2], vec![0.0; 3]);
    }
}
