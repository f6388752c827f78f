//! Dense row-major f64 tensors.
//!
//! Shapes are plain `Vec<usize>`; a scalar is a one-element 1-D tensor.
//! Broadcasting follows the usual trailing-alignment rules (a dimension
//! matches if equal or one of the two is 1).

use crate::error::DiffError;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(DiffError::Invalid(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if shape.is_empty() {
            return Err(DiffError::Invalid(
                "empty shapes are not used; scalars are shape [1]".into(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DiffError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value; errors unless the tensor holds exactly one element.
    pub fn item(&self) -> Result<f64, DiffError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(DiffError::Invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_for(&self.shape)
    }
}

pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast result shape of `a` and `b`, trailing-aligned; None if
/// incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of an operand viewed through a broadcast output shape: 0 where the
/// operand dimension is 1 (or missing).
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides_for(shape);
    let offset = out_shape.len() - shape.len();
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..out_shape.len() {
        if i >= offset && shape[i - offset] != 1 {
            s[i] = own[i - offset];
        }
    }
    s
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape`, undoing a
/// broadcast. Used by backward passes of broadcasting ops.
pub fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_len: usize = target_shape.iter().product();
    let mut out = vec![0.0; target_len];
    let tstrides = broadcast_strides(target_shape, grad_shape);
    let gstrides = strides_for(grad_shape);
    let total: usize = grad_shape.iter().product();
    for flat in 0..total {
        let mut rem = flat;
        let mut tidx = 0usize;
        for d in 0..grad_shape.len() {
            let i = rem / gstrides[d];
            rem %= gstrides[d];
            tidx += i * tstrides[d];
        }
        out[tidx] += grad[flat];
    }
    out
}
