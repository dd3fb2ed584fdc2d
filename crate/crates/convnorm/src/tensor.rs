//! Dense little tensors: the only data container in this crate.
//!
//! Everything is row-major `f64`, rank 1 to 4, immutable after
//! construction. Construction checks shape consistency and rejects
//! NaN/Inf up front so that later numerical comparisons never have to
//! reason about non-finite propagation.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Row-major dense array of `f64` with rank 1..=4 and positive extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating rank, extents, length, and finiteness.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "rank must be 1..={MAX_RANK}, got {}",
                shape.len()
            )));
        }
        if let Some(pos) = shape.iter().position(|&e| e == 0) {
            return Err(Error::Shape(format!("extent 0 at axis {pos}")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expected
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor::new(shape, vec![0.0; len])
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are positive, so there is always at least one value
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major flat index of a multi-index. Panics if out of bounds;
    /// indexing is an internal programming contract, not a domain error.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (axis, (&i, &e)) in idx.iter().zip(self.shape.iter()).enumerate() {
            assert!(
                i < e,
                "index {i} out of bounds for axis {axis} (extent {e})"
            );
            flat = flat * e + i;
        }
        flat
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }
}

/// A stack of convolution kernels of shape `(c_out, c_in, k1, k2)`.
/// 1D kernel stacks use `k2 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStack {
    weights: Tensor,
}

impl KernelStack {
    /// Wraps a rank-4 tensor as a kernel stack.
    pub fn new(weights: Tensor) -> Result<KernelStack> {
        if weights.rank() != 4 {
            return Err(Error::Shape(format!(
                "kernel stack must be rank 4 (c_out, c_in, k1, k2), got rank {}",
                weights.rank()
            )));
        }
        Ok(KernelStack { weights })
    }

    pub fn from_parts(
        c_out: usize,
        c_in: usize,
        k1: usize,
        k2: usize,
        data: Vec<f64>,
    ) -> Result<KernelStack> {
        KernelStack::new(Tensor::new(vec![c_out, c_in, k1, k2], data)?)
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn k1(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn k2(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn into_weights(self) -> Tensor {
        self.weights
    }

    /// The `(k1, k2)` kernel connecting input channel `j` to output
    /// channel `k`, as a rank-2 tensor.
    pub fn kernel(&self, k: usize, j: usize) -> Tensor {
        let (k1, k2) = (self.k1(), self.k2());
        let start = self.weights.flat_index(&[k, j, 0, 0]);
        let slice = &self.weights.data()[start..start + k1 * k2];
        Tensor::new(vec![k1, k2], slice.to_vec()).expect("slice of a valid tensor")
    }
}

/// A batch of multi-channel activations of shape `(batch, channels, h, w)`.
/// 1D signals use `h = 1` or `w = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    values: Tensor,
}

impl ActivationBatch {
    pub fn new(values: Tensor) -> Result<ActivationBatch> {
        if values.rank() != 4 {
            return Err(Error::Shape(format!(
                "activation batch must be rank 4 (batch, channels, h, w), got rank {}",
                values.rank()
            )));
        }
        Ok(ActivationBatch { values })
    }

    pub fn zeros(batch: usize, channels: usize, h: usize, w: usize) -> Result<ActivationBatch> {
        ActivationBatch::new(Tensor::zeros(vec![batch, channels, h, w])?)
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    /// The `(h, w)` grid for sample `b`, channel `c`, as a flat row-major slice.
    pub fn channel(&self, b: usize, c: usize) -> &[f64] {
        let hw = self.height() * self.width();
        let start = self.values.flat_index(&[b, c, 0, 0]);
        &self.values.data()[start..start + hw]
    }
}

/// Pads each axis with `(left, right)` zeros. Original values keep their
/// relative order at the left-pad offset; new entries are exactly zero.
pub fn zero_pad(t: &Tensor, pads: &[(usize, usize)]) -> Tensor {
    assert_eq!(
        pads.len(),
        t.rank(),
        "one (left, right) pad pair per axis required"
    );
    let out_shape: Vec<usize> = t
        .shape()
        .iter()
        .zip(pads)
        .map(|(&e, &(l, r))| e + l + r)
        .collect();
    let mut out = vec![0.0; out_shape.iter().product()];

    // Walk the input in row-major order, recomputing the shifted output
    // flat index per element. Tensors here are small; clarity wins.
    let rank = t.rank();
    let mut idx = vec![0usize; rank];
    for &v in t.data() {
        let mut flat = 0;
        for axis in 0..rank {
            flat = flat * out_shape[axis] + idx[axis] + pads[axis].0;
        }
        out[flat] = v;
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            if idx[axis] < t.shape()[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("padded copy of a valid tensor")
}

/// Keeps indices 0, s, 2s, … along each axis; output extent is
/// ceil(extent / s). A stride of 1 leaves the axis untouched.
pub fn downsample(t: &Tensor, strides: &[usize]) -> Result<Tensor> {
    if strides.len() != t.rank() {
        return Err(Error::Argument(format!(
            "one stride per axis required: got {} strides for rank {}",
            strides.len(),
            t.rank()
        )));
    }
    if let Some(pos) = strides.iter().position(|&s| s == 0) {
        return Err(Error::Argument(format!("stride 0 at axis {pos}")));
    }
    let out_shape: Vec<usize> = t
        .shape()
        .iter()
        .zip(strides)
        .map(|(&e, &s)| e.div_ceil(s))
        .collect();
    let rank = t.rank();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    let mut idx = vec![0usize; rank];
    let total: usize = out_shape.iter().product();
    for _ in 0..total {
        let src: Vec<usize> = idx.iter().zip(strides).map(|(&i, &s)| i * s).collect();
        out.push(t.get(&src));
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

/// Cyclic reversal per axis: index 0 stays, indices 1..e reverse.
/// [v0, v1, v2, v3] becomes [v0, v3, v2, v1]. Involutive, and the DFT
/// magnitude is unchanged (the spectrum is conjugated).
pub fn flip_kernel(a: &Tensor) -> Tensor {
    let rank = a.rank();
    let shape = a.shape().to_vec();
    let mut out = vec![0.0; a.len()];
    let mut idx = vec![0usize; rank];
    for &v in a.data() {
        let mut flat = 0;
        for axis in 0..rank {
            let e = shape[axis];
            let i = idx[axis];
            let flipped = if i == 0 { 0 } else { e - i };
            flat = flat * e + flipped;
        }
        out[flat] = v;
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Tensor::new(shape, out).expect("permutation of a valid tensor")
}
