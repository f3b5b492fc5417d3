//! Dense rank-1..4 numeric arrays and the exact set of forward/backward
//! operations the pipeline's networks need.
//!
//! Everything here is deterministic: the same inputs produce bit-identical
//! outputs, which is what lets the rest of the workspace pin oracle values.

pub mod io;
pub mod ops;
pub mod sgd;
pub mod tape;

use thiserror::Error;

use crate::scalar::Scalar;

pub const MAX_RANK: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor shape must have rank 1..={MAX_RANK}, got rank {rank}")]
    BadRank { rank: usize },
    #[error("tensor extent for axis {axis} must be positive in shape {shape:?}")]
    ZeroExtent { axis: usize, shape: Vec<usize> },
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: input channels {got} do not match parameter channels {expected}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: inner dimensions disagree: lhs {lhs:?} vs rhs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: output spatial extent would be empty for input {input:?}, kernel {kernel}x{kernel_w}, stride {stride}, padding {padding}")]
    EmptyOutput {
        op: &'static str,
        input: Vec<usize>,
        kernel: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    #[error("{op}: batch dimension must be non-empty")]
    EmptyBatch { op: &'static str },
    #[error("{op}: parameter invariant violated: {reason}")]
    BadParams { op: &'static str, reason: String },
    #[error("backward: loss node must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: node {node} does not support differentiation")]
    NotDifferentiable { node: usize },
    #[error("tape: node id {node} out of range (tape has {len} nodes)")]
    BadNodeId { node: usize, len: usize },
}

/// Dense row-major array of rank 1..=4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self, TensorError> {
        check_shape(shape)?;
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        check_shape(shape)?;
        let numel = shape.iter().product::<usize>();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        })
    }

    pub fn full(shape: &[usize], value: S) -> Result<Self, TensorError> {
        check_shape(shape)?;
        let numel = shape.iter().product::<usize>();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        })
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        let converted = data.iter().map(|&v| S::from_f64_lossy(v)).collect();
        Self::new(shape, converted)
    }

    /// Rank-1 tensor from a non-empty plain vector.
    pub fn vector(data: Vec<S>) -> Self {
        assert!(!data.is_empty(), "rank-1 tensor needs at least one element");
        let len = data.len();
        Self::new(&[len], data).expect("rank-1 shape is always valid")
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> S {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        check_shape(shape)?;
        let expected = shape.iter().product::<usize>();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: self.data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Gaussian-initialized tensor, seeded; Box-Muller over the given RNG.
    pub fn randn(shape: &[usize], std_dev: f64, rng: &mut impl rand::Rng) -> Result<Self, TensorError> {
        check_shape(shape)?;
        let numel = shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(S::from_f64_lossy(r * theta.cos() * std_dev));
            if data.len() < numel {
                data.push(S::from_f64_lossy(r * theta.sin() * std_dev));
            }
        }
        Self::new(shape, data)
    }

    /// Maximum absolute elementwise difference; shapes must already agree.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }
}

fn check_shape(shape: &[usize]) -> Result<(), TensorError> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(TensorError::BadRank { rank: shape.len() });
    }
    for (axis, &extent) in shape.iter().enumerate() {
        if extent == 0 {
            return Err(TensorError::ZeroExtent {
                axis,
                shape: shape.to_vec(),
            });
        }
    }
    Ok(())
}
