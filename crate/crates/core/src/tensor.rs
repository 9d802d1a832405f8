//! Dense row-major tensors over a generic float scalar.
//!
//! Training and evaluation run at `f32`; gradient checking runs at `f64`
//! because central differences lose too many digits in single precision.

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type for all numeric work. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const BITS: u32;

    /// Raw bit pattern, for bit-identity hashes of parameter state.
    fn to_bit_pattern(self) -> u64;
}

impl Scalar for f32 {
    const BITS: u32 = 32;
    fn to_bit_pattern(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;
    fn to_bit_pattern(self) -> u64 {
        self.to_bits()
    }
}

/// Convert an `f64` literal into the active scalar type.
#[inline]
pub fn lit<E: Scalar>(x: f64) -> E {
    E::from_f64(x).expect("f64 literal converts to scalar")
}

/// A dense row-major tensor. Rank is arbitrary, but all differentiable ops
/// treat tensors as rank-2 matrices; images use rank-3 `[H, W, C]` storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Row vector `[1, d]`.
    pub fn row_vec(data: Vec<E>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2, "rank-2 access on {:?}", self.shape);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2, "rank-2 access on {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[E] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [E] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> E {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: E) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| F::from_f64(v.to_f64().expect("finite cast")).expect("cast"))
                .collect(),
        }
    }
}

/// `C = A @ B` for `A: [m, k]`, `B: [k, n]`.
pub fn matmul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let a_row = a.row(i);
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data()[kk * n..(kk + 1) * n];
            for j in 0..n {
                o_row[j] += aik * b_row[j];
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `C = A @ B^T` for `A: [m, k]`, `B: [n, k]`.
pub fn matmul_nt<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    debug_assert_eq!(k, b.cols());
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..n {
            let b_row = b.row(j);
            let mut acc = E::zero();
            for t in 0..k {
                acc += a_row[t] * b_row[t];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `C = A^T @ B` for `A: [m, k]`, `B: [m, n]`.
pub fn matmul_tn<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(m, b.rows());
    let mut out = vec![E::zero(); k * n];
    for r in 0..m {
        let a_row = a.row(r);
        let b_row = b.row(r);
        for i in 0..k {
            let ari = a_row[i];
            let o_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                o_row[j] += ari * b_row[j];
            }
        }
    }
    Tensor {
        shape: vec![k, n],
        data: out,
    }
}

pub fn transpose<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_against_naive_loops() {
        // Independent oracle: plain ijk accumulation.
        let a = Tensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.37 - 1.0).collect()).unwrap();
        let b = Tensor::matrix(4, 5, (0..20).map(|v| (v as f64).sin()).collect()).unwrap();
        let c = matmul(&a, &b);
        for i in 0..3 {
            for j in 0..5 {
                let mut want = 0.0;
                for k in 0..4 {
                    want += a.at(i, k) * b.at(k, j);
                }
                assert!((c.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(4, 3, (0..12).map(|v| v as f64 - 5.5).collect()).unwrap();
        let nt = matmul_nt(&a, &b);
        let via_t = matmul(&a, &transpose(&b));
        assert_eq!(nt.data(), via_t.data());

        let c = Tensor::matrix(2, 4, (0..8).map(|v| v as f64 * 0.3).collect()).unwrap();
        let tn = matmul_tn(&a, &c);
        let via_t2 = matmul(&transpose(&a), &c);
        assert_eq!(tn.data(), via_t2.data());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let err = Tensor::<f32>::matrix(2, 3, vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }
}
