//! Dense rank-2 tensor, row-major. The single carrier type for features,
//! weights, activations, and gradients.

use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from row-major data. Requires `rows >= 1`, `cols >= 1`
    /// and `data.len() == rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!(
                "tensor dimensions must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows: rows.max(1),
            cols: cols.max(1),
            data: vec![S::zero(); rows.max(1) * cols.max(1)],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        let mut t = Self::zeros(rows, cols);
        t.data.fill(value);
        t
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Builds a tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::config("ragged rows in tensor literal".to_string()));
        }
        Tensor::new(r, c, rows.iter().flatten().copied().collect())
    }

    /// 1xN row vector.
    pub fn row_vector(values: &[S]) -> Result<Self> {
        Tensor::new(1, values.len(), values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        S::PRECISION
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transposed(&self) -> Tensor<S> {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Mean over all entries.
    pub fn mean(&self) -> S {
        let sum: S = self.data.iter().copied().sum();
        sum / S::from_usize(self.data.len()).unwrap()
    }

    /// Largest absolute entry-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }

    /// Exact element-for-element equality (bit-level for finite values).
    pub fn bit_eq(&self, other: &Tensor<S>) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
    }

    /// Element-type conversion (`f32` -> `f64` is exact).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&x| T::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dimensions() {
        assert!(Tensor::<f64>::new(0, 3, vec![]).is_err());
        assert!(Tensor::<f64>::new(3, 0, vec![]).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::<f64>::new(2, 2, vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn row_major_layout() {
        let t = Tensor::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.get(0, 1), 2.0);
        assert_eq!(t.get(1, 0), 3.0);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::from_rows(&[vec![1.0f64, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(t.transposed().transposed(), t);
        assert_eq!(t.transposed().get(2, 1), 6.0);
    }

    #[test]
    fn precision_tag_follows_element_type() {
        assert_eq!(Tensor::<f32>::zeros(1, 1).precision(), Precision::Single);
        assert_eq!(Tensor::<f64>::zeros(1, 1).precision(), Precision::Double);
    }

    #[test]
    fn cast_f32_to_f64_is_exact() {
        let t = Tensor::from_rows(&[vec![0.1f32, -2.5], vec![3.25, 7.75]]).unwrap();
        let up: Tensor<f64> = t.cast();
        let back: Tensor<f32> = up.cast();
        assert!(t.bit_eq(&back));
    }
}
