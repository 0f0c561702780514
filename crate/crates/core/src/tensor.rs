//! Dense row-major tensor used by the whole numeric core.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<A: Scalar> {
    shape: Vec<usize>,
    data: Vec<A>,
}

impl<A: Scalar> Tensor<A> {
    pub fn new(shape: Vec<usize>, data: Vec<A>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![A::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: A) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: A) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<A>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[A] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [A] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<A> {
        self.data
    }

    pub fn item(&self) -> A {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn at2(&self, i: usize, j: usize) -> A {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: A) {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        self.data[i * cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[A] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Pixel accessor for `[C, H, W]` images.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> A {
        debug_assert_eq!(self.shape.len(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: A) {
        debug_assert_eq!(self.shape.len(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn map(&self, f: impl Fn(A) -> A) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(A, A) -> A) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, k: A) -> Self {
        self.map(|x| x * k)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sum(&self) -> A {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> A {
        self.sum() / A::from_usize_(self.data.len())
    }

    pub fn dot(&self, other: &Self) -> A {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> A {
        self.dot(self).sqrt()
    }

    pub fn l2_distance(&self, other: &Self) -> A {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<A>()
            .sqrt()
    }

    pub fn cosine(&self, other: &Self) -> A {
        let denom = self.norm() * other.norm();
        if denom == A::zero() {
            A::zero()
        } else {
            self.dot(other) / denom
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.shape.len(), 2);
        assert_eq!(other.shape.len(), 2);
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![A::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == A::zero() {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    pub fn transpose2(&self) -> Self {
        assert_eq!(self.shape.len(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![A::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Self {
            shape: vec![n, m],
            data,
        }
    }

    /// Matrix-vector product: `[m, n] x [n] -> [m]`.
    pub fn matvec(&self, v: &Self) -> Self {
        assert_eq!(self.shape.len(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        assert_eq!(v.len(), n);
        let mut out = vec![A::zero(); m];
        for i in 0..m {
            out[i] = self.data[i * n..(i + 1) * n]
                .iter()
                .zip(&v.data)
                .map(|(&a, &b)| a * b)
                .sum();
        }
        Self {
            shape: vec![m],
            data: out,
        }
    }

    pub fn l2_normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == A::zero() {
            return Err(Error::Normalization("zero-norm vector".into()));
        }
        Ok(self.scale(A::one() / n))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// SHA-256 over shape and f64 bit patterns; stable freeze-contract checksum.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for d in &self.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for x in &self.data {
            h.update(x.to_f64_().to_bits().to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Checksum of an ordered collection of named tensors.
pub fn named_checksum<A: Scalar>(arrays: &[(String, &Tensor<A>)]) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in arrays {
        h.update(name.as_bytes());
        h.update(t.checksum());
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn checksum_is_stable_and_sensitive() {
        let a = Tensor::new(vec![2], vec![1.0f64, 2.0]);
        let b = Tensor::new(vec![2], vec![1.0f64, 2.0]);
        let c = Tensor::new(vec![2], vec![1.0f64, 2.5]);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn normalization_rejects_zero_vector() {
        let z = Tensor::<f64>::zeros(&[3]);
        assert!(z.l2_normalized().is_err());
    }
}
