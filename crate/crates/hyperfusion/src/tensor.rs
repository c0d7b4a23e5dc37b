//! Dense row-major f64 tensors.
//!
//! Everything downstream (autodiff, models, metrics) works on these. Values
//! are always `f64`: the toy problem sizes make precision cheaper than
//! debugging drift, and the finite-difference checks depend on it.

use thiserror::Error;

/// Errors from tensor construction and the differentiable operations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: product does not match data length {len}")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("NaN encountered in backward at node {node} ({op})")]
    NanInBackward { node: usize, op: &'static str },
    #[error("graph mode is unset; call Tape::train or Tape::eval before {op}")]
    ModeUnset { op: &'static str },
    #[error("gradient check hit a non-differentiable point after {retries} jitter retries (kink margin {margin:.3e})")]
    KinkDetected { retries: usize, margin: f64 },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{name}`: generated (theta_H) parameters must be non-trainable and non-regularized")]
    InvalidPartition { name: String },
}

/// Dense tensor: shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gather rows of a rank>=2 tensor along the first axis.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let row_len: usize = self.shape[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            out.extend_from_slice(&self.data[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data: out }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population variance over all entries.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_shape_product() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidShape { .. }));
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn gather_rows_copies_rows() {
        let t = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = t.gather_rows(&[2, 0]);
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn variance_is_population_variance() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert!((t.variance() - 1.25).abs() < 1e-15);
    }
}
