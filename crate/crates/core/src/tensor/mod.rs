//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major value. Computation happens on a
//! [`Graph`], which records every op as it runs; [`Graph::backward`] then
//! walks the tape in reverse and accumulates gradients for every node that
//! depends on a trainable input.

mod graph;
mod kernels;

pub use graph::{Graph, Var};
pub use kernels::sigmoid;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Builds a 2-D tensor from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!("item() on tensor of shape {:?}", self.shape))),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Boolean mask broadcast against the tensor it filters; `true` keeps an entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!("mask shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        Ok(Mask { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

/// For every linear index of `dst`, the linear index of `src` it reads under
/// numpy-style broadcasting (`src` right-aligned, size-1 or missing dims repeat).
pub(crate) fn broadcast_map(src: &[usize], dst: &[usize]) -> Result<Vec<usize>> {
    if src.len() > dst.len() {
        return Err(Error::shape(format!("cannot broadcast {src:?} to {dst:?}")));
    }
    let offset = dst.len() - src.len();
    let mut strides = vec![0usize; dst.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let (s, d) = (src[i], dst[offset + i]);
        if s != d && s != 1 {
            return Err(Error::shape(format!("cannot broadcast {src:?} to {dst:?}")));
        }
        strides[offset + i] = if s == 1 { 0 } else { acc };
        acc *= s;
    }
    let total: usize = dst.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; dst.len()];
    let mut cur = 0usize;
    for _ in 0..total {
        out.push(cur);
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < dst[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok(out)
}

/// Broadcast shape of two batch shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("batch shapes {a:?} and {b:?} do not broadcast"))),
        };
    }
    Ok(out)
}
