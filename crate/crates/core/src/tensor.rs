//! Dense row-major tensors over `f32`/`f64` and the small op set everything
//! else is built on: matmul, softmax, axis reductions, elementwise maps.
//!
//! `f32` is the training dtype; `f64` is reserved for verification oracles
//! (gradient checks are meaningless at `f32` precision). Tensors are
//! immutable values once built and safe to share across threads.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("reduction over empty axis {axis}")]
    EmptyReduction { axis: usize },
    #[error("non-finite value {value} at flat index {index} in {context}")]
    NonFinite {
        context: String,
        index: usize,
        value: f64,
    },
}

/// On-disk element type tag. The values are part of the tensor file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Scalar element of a [`Tensor`]. Implemented for `f32` and `f64` only.
pub trait Element:
    num_traits::Float + num_traits::NumCast + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Reduction flavor for [`Tensor::reduce`]. Variance uses the population
/// convention (divide by n).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Variance,
}

/// Dense row-major numeric array with shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} ({} elements)", self.shape, self.data.len())
        }
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D tensor from nested rows; rows must be equally long.
    pub fn from_rows(rows: &[Vec<E>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Tensor {
            shape: vec![r, c],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
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

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> E {
        self.data[r * self.shape[1] + c]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<E>, f: impl Fn(E, E) -> E) -> Result<Tensor<E>, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Lossless-enough dtype conversion through `f64`.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.as_f64())).collect(),
        }
    }

    /// Explicit NaN/Inf check; reports the first offending element.
    pub fn validate_finite(&self, context: &str) -> Result<(), TensorError> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    context: context.to_string(),
                    index: i,
                    value: v.as_f64(),
                });
            }
        }
        Ok(())
    }

    /// Reduce over the given axes (removed from the shape). Mean and variance
    /// divide by the number of reduced elements.
    pub fn reduce(&self, axes: &[usize], kind: Reduce) -> Result<Tensor<E>, TensorError> {
        let rank = self.rank();
        let mut reduce_mask = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(TensorError::InvalidAxis { axis, rank });
            }
            if self.shape[axis] == 0 {
                return Err(TensorError::EmptyReduction { axis });
            }
            reduce_mask[axis] = true;
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduce_mask)
            .filter(|(_, &m)| !m)
            .map(|(&s, _)| s)
            .collect();
        let out_numel: usize = out_shape.iter().product::<usize>().max(1);
        let group: usize = self
            .shape
            .iter()
            .zip(&reduce_mask)
            .filter(|(_, &m)| m)
            .map(|(&s, _)| s)
            .product::<usize>()
            .max(1);

        // Map each input element to its output slot, then accumulate.
        let strides = row_major_strides(&self.shape);
        let out_strides = row_major_strides(&out_shape);
        let slot_of = |flat: usize| -> usize {
            let mut rem = flat;
            let mut slot = 0;
            let mut out_axis = 0;
            for axis in 0..rank {
                let idx = rem / strides[axis];
                rem %= strides[axis];
                if !reduce_mask[axis] {
                    slot += idx * out_strides[out_axis];
                    out_axis += 1;
                }
            }
            slot
        };

        let mut sums = vec![E::zero(); out_numel];
        for (flat, &v) in self.data.iter().enumerate() {
            sums[slot_of(flat)] = sums[slot_of(flat)] + v;
        }
        let n = E::from_f64(group as f64);
        let data = match kind {
            Reduce::Sum => sums,
            Reduce::Mean => sums.into_iter().map(|s| s / n).collect(),
            Reduce::Variance => {
                let means: Vec<E> = sums.into_iter().map(|s| s / n).collect();
                let mut sq = vec![E::zero(); out_numel];
                for (flat, &v) in self.data.iter().enumerate() {
                    let slot = slot_of(flat);
                    let d = v - means[slot];
                    sq[slot] = sq[slot] + d * d;
                }
                sq.into_iter().map(|s| s / n).collect()
            }
        };
        let shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        Tensor::new(shape, data)
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1];
    }
    strides
}

/// Work size (in multiply-adds) above which matmul splits rows across the
/// rayon pool. Row-parallel execution is bitwise identical to sequential.
const PAR_WORK: usize = 1 << 21;

/// `c[i][j] = sum_r a[i][r] * b[r][j]` for rank-2 inputs.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![E::zero(); m * n];
    let ad = a.data();
    let bd = b.data();

    let kernel = |i: usize, out_row: &mut [E]| {
        let a_row = &ad[i * k..(i + 1) * k];
        for (r, &av) in a_row.iter().enumerate() {
            let b_row = &bd[r * n..(r + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    };

    if m * k * n >= PAR_WORK && m > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| kernel(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            kernel(i, row);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a^T` for a rank-2 tensor.
pub fn transpose<E: Element>(a: &Tensor<E>) -> Tensor<E> {
    debug_assert_eq!(a.rank(), 2);
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose shape")
}

/// Softmax along `axis`, computed with max-subtraction for stability.
/// Every slice along the axis sums to 1.
pub fn softmax<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>, TensorError> {
    let rank = x.rank();
    if axis >= rank {
        return Err(TensorError::InvalidAxis { axis, rank });
    }
    let extent = x.shape()[axis];
    if extent == 0 {
        return Err(TensorError::EmptyReduction { axis });
    }
    let strides = row_major_strides(x.shape());
    let stride = strides[axis];
    let mut out = x.data().to_vec();
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut max = out[base];
            for s in 1..extent {
                let v = out[base + s * stride];
                if v > max {
                    max = v;
                }
            }
            let mut sum = E::zero();
            for s in 0..extent {
                let e = (out[base + s * stride] - max).exp();
                out[base + s * stride] = e;
                sum = sum + e;
            }
            for s in 0..extent {
                out[base + s * stride] = out[base + s * stride] / sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
