use serde::{Deserialize, Serialize};

use super::{NnError, Result};
use crate::linalg::Matrix;

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    /// (channels or features, spatial size).
    pub(crate) fn channel_split(&self) -> (usize, usize) {
        match *self {
            Shape::Flat(n) => (n, 1),
            Shape::Image {
                channels,
                height,
                width,
            } => (channels, height * width),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Flat(n) => vec![n],
            Shape::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }
}

/// Batch of activations: `batch` samples of `shape`, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    batch: usize,
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(batch: usize, shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * shape.numel() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} values ({batch} x {shape:?})", batch * shape.numel()),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { batch, shape, data })
    }

    pub fn zeros(batch: usize, shape: Shape) -> Self {
        Self {
            batch,
            shape,
            data: vec![0.0; batch * shape.numel()],
        }
    }

    /// `b × features` tensor from a matrix whose rows are samples.
    pub fn from_rows(m: &Matrix) -> Self {
        Self {
            batch: m.rows(),
            shape: Shape::Flat(m.cols()),
            data: m.as_slice().to_vec(),
        }
    }

    /// Samples become columns: a `features × batch` matrix.
    pub fn to_columns(&self) -> Matrix {
        let f = self.shape.numel();
        Matrix::from_fn(f, self.batch, |r, c| self.data[c * f + r])
    }

    /// Inverse of [`Tensor::to_columns`].
    pub fn from_columns(m: &Matrix) -> Self {
        Self::from_rows(&m.transpose())
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.shape.numel();
        &self.data[i * n..(i + 1) * n]
    }

    /// Concatenates along the batch axis.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let shape = parts
            .first()
            .map(|t| t.shape)
            .ok_or_else(|| NnError::ShapeMismatch {
                expected: "at least one tensor".into(),
                got: "none".into(),
            })?;
        let mut data = Vec::new();
        let mut batch = 0;
        for t in parts {
            if t.shape != shape {
                return Err(NnError::ShapeMismatch {
                    expected: format!("{shape:?}"),
                    got: format!("{:?}", t.shape),
                });
            }
            batch += t.batch;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { batch, shape, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
