//! Dense row-major tensors with numpy-style broadcasting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self { shape: vec![values.len()], data: values.to_vec() }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "tensor of shape {:?} is not scalar", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// Row-major strides for this shape.
    pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
        let mut strides = vec![0usize; shape.len()];
        let mut acc = 1usize;
        for i in (0..shape.len()).rev() {
            strides[i] = acc;
            acc *= shape[i];
        }
        strides
    }
}

/// Broadcast result shape for two operand shapes (align-right, dims must be
/// equal or 1).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::Shape(format!("cannot broadcast shapes {a:?} and {b:?}")));
        }
    }
    Ok(out)
}

/// Elementwise binary op with broadcasting.
pub fn binary_broadcast(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    if b.is_scalar() {
        let y = b.data[0];
        return Ok(a.map(|x| f(x, y)));
    }
    if a.is_scalar() {
        let x = a.data[0];
        return Ok(b.map(|y| f(x, y)));
    }
    let out_shape = broadcast_shapes(&a.shape, &b.shape)?;
    let rank = out_shape.len();
    let pad = |shape: &[usize]| -> Vec<usize> {
        let mut s = vec![1usize; rank - shape.len()];
        s.extend_from_slice(shape);
        s
    };
    let sa = pad(&a.shape);
    let sb = pad(&b.shape);
    let stra_full = Tensor::strides(&sa);
    let strb_full = Tensor::strides(&sb);
    // stride 0 on broadcast dims
    let stra: Vec<usize> =
        (0..rank).map(|i| if sa[i] == 1 { 0 } else { stra_full[i] }).collect();
    let strb: Vec<usize> =
        (0..rank).map(|i| if sb[i] == 1 { 0 } else { strb_full[i] }).collect();

    let n: usize = out_shape.iter().product();
    let mut data = vec![0.0; n];
    let mut idx = vec![0usize; rank];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for slot in data.iter_mut() {
        *slot = f(a.data[off_a], b.data[off_b]);
        // advance multi-index
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off_a += stra[axis];
            off_b += strb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            off_a -= stra[axis] * out_shape[axis];
            off_b -= strb[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Sum-reduces `grad` down to `shape` (the reverse of broadcasting), used by
/// backward passes of broadcasting ops.
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let rank = grad.rank();
    let mut padded = vec![1usize; rank - shape.len()];
    padded.extend_from_slice(shape);
    let out_strides_full = Tensor::strides(&padded);
    let out_strides: Vec<usize> = (0..rank)
        .map(|i| if padded[i] == 1 { 0 } else { out_strides_full[i] })
        .collect();

    let n_out: usize = padded.iter().product();
    let mut data = vec![0.0; n_out];
    let g_shape = grad.shape().to_vec();
    let mut idx = vec![0usize; rank];
    let mut off_out = 0usize;
    for &g in grad.data() {
        data[off_out] += g;
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off_out += out_strides[axis];
            if idx[axis] < g_shape[axis] {
                break;
            }
            off_out -= out_strides[axis] * g_shape[axis];
            idx[axis] = 0;
        }
    }
    Tensor { shape: shape.to_vec(), data }
}
