//! Dense row-major tensor. Small and boring on purpose: the tape owns all the
//! interesting behavior, this type just stores numbers with a shape.

use super::scalar::Real;

/// Dense row-major tensor over a [`Real`] scalar.
///
/// Rank is dynamic (the pipeline uses rank 1–3). For rank-2 tensors the
/// convention everywhere in this crate is `[rows, cols]` where rows index
/// independent items (pixels, voxels, samples) and cols index channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Build from a shape and matching data length. Panics on mismatch: shape
    /// errors at this level are programming bugs, not recoverable conditions.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor shape {:?} wants {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Scalar wrapped as a `[1, 1]` tensor.
    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1, 1], data: vec![value] }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows of a rank-2 tensor (panics on other ranks).
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a rank-2 tensor, got {:?}", self.shape);
        self.shape[0]
    }

    /// Cols of a rank-2 tensor (panics on other ranks).
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a rank-2 tensor, got {:?}", self.shape);
        self.shape[1]
    }

    /// Borrow one row of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows() && c < self.cols());
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    /// The single element of a `[1,1]` (or any one-element) tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() needs exactly one element, shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Cast element type (through f64, exact for widening).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect() }
    }

    /// Elementwise `self += other` (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}
